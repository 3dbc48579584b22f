"""Qualitative artifacts: feature dumps, 2-D projections, Grad-CAM maps and result tables."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .dataset import MAGNIFICATIONS, MagnificationFactor
from .errors import LayerNotFound, NonSpatialLayer, SchemaMismatch
from .evaluate import EvalReport
from .model import EncoderAdapter, state_hash, to_tensor
from .transforms import resize

CAM_COLORMAP = "jet"
OVERLAY_ALPHA = 0.45


# ----------------------------------------------------------------------------
# feature dumps
# ----------------------------------------------------------------------------


@dataclass
class FeatureDump:
    rows: list  # (specimen_id, magnification, label, np.ndarray)
    encoder_id: str

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([r[3] for r in self.rows]) if self.rows else np.empty((0, 0))

    @property
    def labels(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path) -> None:
        d = self.matrix.shape[1] if self.rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["specimen_id", "magnification", "label"] + [f"f{i}" for i in range(d)])
            for sid, mf, label, vec in self.rows:
                w.writerow([sid, int(mf), label] + [repr(float(v)) for v in vec])

    @classmethod
    def read_csv(cls, path, encoder_id: str = "") -> "FeatureDump":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec in reader:
                rows.append((rec[0], MagnificationFactor(int(rec[1])), int(rec[2]),
                             np.array([float(v) for v in rec[3:]])))
        return cls(rows, encoder_id)


@torch.no_grad()
def export_features(encoder: EncoderAdapter, samples, path=None, input_size: int = 64,
                    magnifications=MAGNIFICATIONS, batch_size: int = 128) -> FeatureDump:
    """Pooled features, one row per (specimen, magnification), eval mode, resize only.

    The encoder's train/eval flag is restored afterwards and no buffers change.
    """
    was_training = encoder.training
    encoder.eval()
    items = [(s, MagnificationFactor(mf)) for s in samples for mf in magnifications]
    rows = []
    try:
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            x = to_tensor(np.stack([resize(s.image(mf), input_size) for s, mf in chunk]))
            feats = encoder(x).double().numpy()
            rows += [(s.specimen_id, mf, int(s.label), f) for (s, mf), f in zip(chunk, feats)]
    finally:
        encoder.train(was_training)
    dump = FeatureDump(rows, state_hash(encoder)[:16])
    if path is not None:
        dump.write_csv(path)
    return dump


def project_2d(features: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    """N x d -> N x 2; principal components by default, t-SNE on request."""
    X = np.asarray(features, dtype=np.float64)
    if method == "pca":
        Xc = X - X.mean(0)
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        out = Xc @ vt[:2].T
        if out.shape[1] < 2:
            out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
        return out
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(2.0, (len(X) - 1) / 3))
        return TSNE(n_components=2, random_state=seed, perplexity=perplexity, init="pca").fit_transform(X)
    raise ValueError(f"unknown projection {method}")


def plot_projection(dump: FeatureDump, path, method: str = "pca", seed: int = 0) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xy = project_2d(dump.matrix, method, seed)
    colors = np.where(dump.labels == 0, "tab:blue", "tab:red")
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(xy[:, 0], xy[:, 1], c=colors, s=12)
    ax.set_title(f"{method.upper()} of encoder {dump.encoder_id}")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


# ----------------------------------------------------------------------------
# Grad-CAM
# ----------------------------------------------------------------------------


@dataclass
class ActivationMap:
    source_image_id: str
    target_class: int
    layer: str
    map: np.ndarray  # H' x W', values in [0, 1]
    overlay: np.ndarray  # H x W x 3 uint8

    def save(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.source_image_id}_c{self.target_class}"
        png, raw = out_dir / f"{stem}_cam.png", out_dir / f"{stem}_cam.npy"
        Image.fromarray(self.overlay).save(png)
        np.save(raw, self.map.astype(np.float64))
        return png, raw


def grad_cam_map(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Channel weights are spatial means of the gradients; map = relu(sum_k w_k A_k), min-max scaled.

    A map that is zero everywhere stays zero; a constant positive map becomes all ones.
    """
    A = np.asarray(activations, dtype=np.float64)
    G = np.asarray(gradients, dtype=np.float64)
    if A.ndim != 3 or A.shape != G.shape:
        raise NonSpatialLayer(f"expected C x H x W activations and gradients, got {A.shape} / {G.shape}")
    weights = G.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, A, axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam) if hi > 0 else np.zeros_like(cam)


def default_cam_layer(model: nn.Module) -> str:
    """Last block of the small encoder, else the last Conv2d in the model."""
    names = dict(model.named_modules())
    blocks = [n for n in names if n.startswith("encoder.backbone.blocks.") and n.count(".") == 3]
    if blocks:
        return blocks[-1]
    convs = [n for n, m in names.items() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise LayerNotFound("model has no convolutional layer")
    return convs[-1]


def render_overlay(image: np.ndarray, cam: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    from matplotlib import colormaps

    h, w = image.shape[:2]
    up = np.asarray(Image.fromarray(cam.astype(np.float32)).resize((w, h), Image.BILINEAR), dtype=np.float64)
    heat = colormaps[CAM_COLORMAP](np.clip(up, 0, 1))[..., :3] * 255.0
    return np.clip(np.rint((1 - alpha) * image + alpha * heat), 0, 255).astype(np.uint8)


def grad_cam(model: nn.Module, image: np.ndarray, target_class: int, layer: str | None = None,
             input_size: int | None = None, image_id: str = "image") -> ActivationMap:
    """Gradient-weighted class activation map of ``target_class`` at ``layer``."""
    layer = layer or default_cam_layer(model)
    modules = dict(model.named_modules())
    if layer not in modules:
        raise LayerNotFound(layer)
    captured = {}

    def hook(_module, _inp, out):
        if not isinstance(out, torch.Tensor) or out.ndim != 4:
            raise NonSpatialLayer(f"{layer} output is not a B x C x H x W feature map")
        out.retain_grad()
        captured["act"] = out

    was_training = model.training
    model.eval()
    handle = modules[layer].register_forward_hook(hook)
    try:
        src = resize(image, input_size) if input_size else image
        x = to_tensor(src[None]).to(next(model.parameters()).dtype)
        model.zero_grad(set_to_none=True)
        logits = model(x)
        logits[0, int(target_class)].backward()
    finally:
        handle.remove()
        model.train(was_training)
        model.zero_grad(set_to_none=True)
    act = captured["act"]
    grads = act.grad if act.grad is not None else torch.zeros_like(act)
    cam = grad_cam_map(act[0].detach().double().numpy(), grads[0].double().numpy())
    return ActivationMap(image_id, int(target_class), layer, cam, render_overlay(src, cam))


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------


def _cell(values: Sequence[float]) -> tuple[float, float, str]:
    mean, std = float(np.mean(values)) * 100, float(np.std(values)) * 100
    return mean, std, f"{mean:.2f}±{std:.2f}"


def render_tables(reports: Sequence[EvalReport], layout: str = "breakhis", metric: str = "ila"):
    """Method x column grid of ``mean±std`` cells (percent) over fold reports.

    ``breakhis``: one column per magnification plus ``Mean`` (the overall
    metric of each report). ``bach``/``bisque``: patch-wise and image-wise
    accuracy. Reports are grouped by ``report.meta["method"]``. Returns
    ``(csv_text, text_table, cells)``.
    """
    if layout == "breakhis":
        columns = [f"{int(m)}X" for m in MAGNIFICATIONS] + ["Mean"]

        def values(r: EvalReport):
            if not r.per_magnification:
                raise SchemaMismatch("breakhis layout needs per-magnification metrics")
            row = {}
            for mf, d in r.per_magnification.items():
                row[f"{int(mf)}X"] = d[metric]
            row["Mean"] = r.metrics()[metric]
            return row
    elif layout in ("bach", "bisque"):
        columns = ["Patch-wise", "Image-wise"]

        def values(r: EvalReport):
            if r.patch_accuracy is None or r.image_accuracy is None:
                raise SchemaMismatch(f"{layout} layout needs patch- and image-wise accuracy")
            return {"Patch-wise": r.patch_accuracy, "Image-wise": r.image_accuracy}
    else:
        raise SchemaMismatch(f"unknown layout {layout}")

    grouped: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in reports:
        for col, v in values(r).items():
            grouped[r.meta.get("method", "MPCS")][col].append(v)
    cells = {method: {col: _cell(cols[col]) for col in columns if cols.get(col)}
             for method, cols in grouped.items()}

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method"] + columns)
    for method, row in cells.items():
        w.writerow([method] + [row[c][2] if c in row else "" for c in columns])

    width = max([len("Method")] + [len(m) for m in cells]) + 2
    header = "Method".ljust(width) + "".join(c.rjust(14) for c in columns)
    lines = [f"{layout} {metric.upper() if layout == 'breakhis' else 'accuracy'} (%)", header, "-" * len(header)]
    for method, row in cells.items():
        lines.append(method.ljust(width) + "".join((row[c][2] if c in row else "-").rjust(14) for c in columns))
    return buf.getvalue(), "\n".join(lines) + "\n", cells
