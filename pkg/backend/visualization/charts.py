# Chart visualization module

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from backend.analysis.basic_statistics import ImageBuffer  # noqa: E402
from backend.errors import DatasetIOError  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed id salt and no date stamp keep SVG output byte-identical across runs
plt.rcParams["svg.hashsalt"] = "tinydet"
SAVE_METADATA = {"svg": {"Date": None}, "png": {"Software": None}}


class DetectionCharts:
    """
    Static plots for detection experiments: PR curves, ablation bars and
    dot-style detection overlays
    """

    def __init__(self, config: Dict[str, Any] = None):
        """
        Initialize the charts class

        Args:
            config (Dict[str, Any], optional): Configuration parameters
        """
        self.config = config or {}
        self.default_height = self.config.get("default_height", 4.5)
        self.default_width = self.config.get("default_width", 6.0)
        self.colors = {
            "primary": "#1f77b4",  # Blue
            "error_bar": "#444444",
            "prediction": "#2ca02c",  # Green
            "ground_truth": "#d62728",  # Red
        }

    def _save(self, fig, path: Union[str, Path]) -> Path:
        path = Path(path)
        fmt = path.suffix.lstrip(".").lower() or "svg"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format=fmt, metadata=SAVE_METADATA.get(fmt))
        except OSError as e:
            raise DatasetIOError(f"Failed to write chart {path}: {e}", str(path)) from e
        finally:
            plt.close(fig)
        logger.info(f"Wrote {path}")
        return path

    def plot_pr_curves(
        self,
        curves: Dict[str, Tuple[np.ndarray, np.ndarray]],
        path: Union[str, Path],
        title: str = "Precision-recall",
    ) -> Path:
        """
        Plot one precision-recall curve per series

        Args:
            curves (Dict[str, Tuple[np.ndarray, np.ndarray]]): name -> (recall, precision)
            path: Output file, SVG unless the suffix says otherwise
            title (str): Chart title

        Returns:
            Path: written file
        """
        fig, ax = plt.subplots(figsize=(self.default_width, self.default_height))
        for name, (recall, precision) in curves.items():
            ax.step(recall, precision, where="post", label=name)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title(title)
        if curves:
            ax.legend(loc="lower left", fontsize="small")
        fig.tight_layout()
        return self._save(fig, path)

    def plot_ablation_bars(
        self,
        names: Sequence[str],
        means: Sequence[float],
        stds: Sequence[float],
        path: Union[str, Path],
        metric: str = "mAP",
    ) -> Path:
        """Bar per configuration with a one-std error bar, values in percent"""
        fig, ax = plt.subplots(figsize=(self.default_width, self.default_height))
        positions = np.arange(len(names))
        ax.bar(
            positions,
            np.nan_to_num(np.asarray(means, dtype=float)),
            yerr=np.nan_to_num(np.asarray(stds, dtype=float)),
            color=self.colors["primary"],
            ecolor=self.colors["error_bar"],
            capsize=4,
        )
        ax.set_xticks(positions)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(f"{metric} (%)")
        ax.set_title(f"Component ablation: {metric}")
        fig.tight_layout()
        return self._save(fig, path)

    def render_detections(
        self,
        image: ImageBuffer,
        predictions: Sequence[Tuple[float, float]],
        ground_truth: Sequence[Tuple[float, float]],
        path: Union[str, Path],
        radius: float = 3.0,
        title: Optional[str] = None,
    ) -> Path:
        """
        Grayscale image with predictions as filled green dots and ground truth
        as hollow red circles
        """
        dpi = 100
        fig = plt.figure(figsize=(image.width / dpi * 2, image.height / dpi * 2), dpi=dpi)
        ax = fig.add_axes([0, 0, 1, 1])
        ax.imshow(image.data, cmap="gray", vmin=0.0, vmax=1.0, extent=(0, image.width, image.height, 0))
        if len(ground_truth):
            gt = np.asarray(ground_truth, dtype=float)
            ax.scatter(
                gt[:, 0], gt[:, 1], s=(2 * radius) ** 2, facecolors="none",
                edgecolors=self.colors["ground_truth"], linewidths=0.8,
            )
        if len(predictions):
            pred = np.asarray(predictions, dtype=float)
            ax.scatter(pred[:, 0], pred[:, 1], s=radius**2, c=self.colors["prediction"])
        if title:
            ax.text(2, 10, title, color="yellow", fontsize=8)
        ax.set_xlim(0, image.width)
        ax.set_ylim(image.height, 0)
        ax.axis("off")
        return self._save(fig, path)


def pr_curve_series(frame) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Group a pr_curve.csv frame (columns series, recall, precision) into plot series"""
    curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for name, group in frame.groupby("series", sort=False):
        curves[str(name)] = (
            group["recall"].to_numpy(dtype=float),
            group["precision"].to_numpy(dtype=float),
        )
    return curves


def dot_centers(items: Sequence) -> List[Tuple[float, float]]:
    return [(item.cx, item.cy) for item in items]
