# k-fold splitting of manifest image ids

import logging
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.model_selection import KFold

from backend.errors import ArgumentError

logger = logging.getLogger(__name__)


def kfold_split(
    image_ids: Sequence[int], k: int, seed: int
) -> List[Tuple[List[int], List[int]]]:
    """
    Seeded shuffle followed by k contiguous folds.

    Args:
        image_ids (Sequence[int]): Ids of the manifest records
        k (int): Number of folds, 2 <= k <= len(image_ids)
        seed (int): Shuffle seed

    Returns:
        List[Tuple[List[int], List[int]]]: (train ids, test ids) per fold;
        test sets are disjoint, cover every id and differ in size by at most one
    """
    ids = np.asarray(list(image_ids))
    if k < 2 or k > len(ids):
        raise ArgumentError(f"k must satisfy 2 <= k <= {len(ids)}, got {k}")

    splitter = KFold(n_splits=k, shuffle=True, random_state=int(seed) % 2**32)
    folds = []
    for train_index, test_index in splitter.split(ids):
        folds.append((ids[train_index].tolist(), ids[test_index].tolist()))
    logger.debug(f"kfold_split: {k} folds over {len(ids)} ids")
    return folds
