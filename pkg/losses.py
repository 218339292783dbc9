"""
Training losses. Each loss is built from autodiff ops, so the same function
serves the forward value and the backward pass.
"""

from typing import Sequence

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import ShapeError


def loss_iou(pred, target) -> Tensor:
    """
    Soft IoU loss 1 - sum(P*G) / sum(P + G - P*G). Two empty volumes give 0.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss_iou: shapes {pred.shape} and {target.shape} differ")
    inter = ad.total(ad.mul(pred, target))
    union = ad.sub(ad.add(ad.total(pred), ad.total(target)), inter)
    if float(union.data) == 0.0:
        return ad.scale(inter, 0.0)
    return ad.add_scalar(ad.scale(ad.div(inter, union), -1.0), 1.0)


def loss_miou(pred_regions, target_labels: np.ndarray, n_regions: int) -> Tensor:
    """Mean soft IoU loss over regions 1..R; ``pred_regions`` is (R, D, H, W)."""
    pred_regions = ad.as_tensor(pred_regions)
    if pred_regions.shape != (n_regions,) + tuple(target_labels.shape):
        raise ShapeError(f"loss_miou: prediction {pred_regions.shape} vs labels {target_labels.shape}")
    terms = [loss_iou(ad.take(pred_regions, r - 1), (target_labels == r).astype(np.float64))
             for r in range(1, n_regions + 1)]
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / n_regions)


def _halve(x: Tensor) -> Tensor:
    """Trilinear halving on an even grid is the 2x2x2 block average."""
    return ad.reshape(ad.avg_pool(ad.reshape(x, (1,) + x.shape)), tuple(n // 2 for n in x.shape))


def pyramid(x: Tensor, levels: int = 3) -> Sequence[Tensor]:
    out = [x]
    for _ in range(levels - 1):
        if any(n % 2 for n in out[-1].shape):
            break
        out.append(_halve(out[-1]))
    return out


def loss_material(generated, real) -> Tensor:
    """
    ||d||^2 + sum over scales {1, 1/2, 1/4} of ||down_s(d)||^2, d = generated - real.
    The multi-scale sum stands in for a perceptual term.
    """
    generated, real = ad.as_tensor(generated), ad.as_tensor(real)
    if generated.shape != real.shape:
        raise ShapeError(f"loss_material: shapes {generated.shape} and {real.shape} differ")
    diff = ad.sub(generated, real)
    acc = ad.total(ad.square(diff))
    for level in pyramid(diff):
        acc = ad.add(acc, ad.total(ad.square(level)))
    return acc


def loss_slice(generated, real, multiscale: bool = True) -> Tensor:
    """Slice reconstruction loss: MSE, optionally plus the MSE of each halved level."""
    generated, real = ad.as_tensor(generated), ad.as_tensor(real)
    if generated.shape != real.shape:
        raise ShapeError(f"loss_slice: shapes {generated.shape} and {real.shape} differ")
    diff = ad.sub(generated, real)
    acc = ad.mean(ad.square(diff))
    if not multiscale:
        return acc
    for level in pyramid(diff)[1:]:
        acc = ad.add(acc, ad.mean(ad.square(level)))
    return acc


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))
