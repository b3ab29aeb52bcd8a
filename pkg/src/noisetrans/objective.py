"""Training losses, evaluation metrics (Chamfer and point-to-mesh), and the
Adam optimizer with a halving learning-rate schedule."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ContractError, NumericError
from .geometry import Cube, Sphere, Torus, TriMesh
from .model import ModelWeights
from .spatial import KdTree


# ---------------------------------------------------------------------------
# metrics (pure numpy)
# ---------------------------------------------------------------------------

def chamfer_distance(s1, s2) -> float:
    """Symmetric mean of nearest-neighbour squared distances."""
    a = np.asarray(s1, dtype=np.float64)
    b = np.asarray(s2, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or b.ndim != 2 or b.shape[1] != 3:
        raise ArgumentError(f"chamfer_distance expects (N, 3) arrays, got {a.shape}, {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise ArgumentError("chamfer_distance over an empty point set")
    _, d_ab = KdTree(b).query(a, 1)
    _, d_ba = KdTree(a).query(b, 1)
    return float(d_ab[:, 0].mean() + d_ba[:, 0].mean())


def point_triangle_sqdist(p, tri) -> float:
    """Exact squared distance from a point to a closed triangle."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    cross = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    if (cross * cross).sum() == 0.0:
        raise ArgumentError("degenerate triangle (zero area)")
    return float(_points_to_triangle(p[None, :], tri[0], tri[1], tri[2])[0])


def _points_to_segment(p, a, b):
    e = b - a
    t = np.clip(((p - a) @ e) / (e @ e), 0.0, 1.0)
    d = p - (a + t[:, None] * e)
    return (d * d).sum(axis=1)


def _points_to_triangle(p, a, b, c):
    """Squared distance from many points to one triangle.

    Projects onto the triangle plane; if the projection's barycentric
    coordinates are inside, the plane distance is the answer, otherwise the
    closest point lies on one of the three edges.
    """
    e0 = b - a
    e1 = c - a
    n = np.cross(e0, e1)
    nn = n @ n
    w = p - a
    dist_plane = (w @ n) / np.sqrt(nn)
    proj = p - dist_plane[:, None] * (n / np.sqrt(nn))
    # barycentric coordinates of the projection
    v = proj - a
    d00 = e0 @ e0
    d01 = e0 @ e1
    d11 = e1 @ e1
    d20 = v @ e0
    d21 = v @ e1
    denom = d00 * d11 - d01 * d01
    s = (d11 * d20 - d01 * d21) / denom
    t = (d00 * d21 - d01 * d20) / denom
    inside = (s >= 0.0) & (t >= 0.0) & (s + t <= 1.0)
    edge = np.minimum(
        _points_to_segment(p, a, b),
        np.minimum(_points_to_segment(p, b, c), _points_to_segment(p, c, a)),
    )
    return np.where(inside, dist_plane * dist_plane, edge)


def point_to_mesh(cloud, surface) -> float:
    """One-sided mean squared distance from points to a surface.

    The surface may be a TriMesh (minimum over triangles) or an analytic
    sphere / torus / cube (closed-form distance). Caller guarantees both live
    in the same frame.
    """
    pts = np.asarray(getattr(cloud, "coords", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ArgumentError(f"point_to_mesh expects a non-empty (N, 3) array, got {pts.shape}")
    if isinstance(surface, (Sphere, Torus, Cube)):
        return float(surface.sqdist(pts).mean())
    if isinstance(surface, TriMesh):
        if len(surface.triangles) == 0:
            raise ArgumentError("mesh has no triangles")
        best = np.full(len(pts), np.inf)
        for tri in surface.triangle_corners():
            best = np.minimum(best, _points_to_triangle(pts, tri[0], tri[1], tri[2]))
        return float(best.mean())
    raise ArgumentError(f"unsupported surface type {type(surface).__name__}")


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------

def loss_cd(y: Tensor, gt) -> Tensor:
    """Differentiable symmetric Chamfer distance; gradients flow to y only."""
    gt = np.asarray(getattr(gt, "coords", gt), dtype=np.float64)
    if y.shape[0] == 0 or len(gt) == 0:
        raise ArgumentError("loss_cd over an empty point set")
    d = ad.pairwise_sqdist(y, Tensor(gt))
    return ad.add(ad.mean(ad.reduce_min(d, axis=1)), ad.mean(ad.reduce_min(d, axis=0)))


def loss_ad(y: Tensor, x) -> Tensor:
    """Mean squared index-matched displacement (anchors outputs to inputs)."""
    x = np.asarray(getattr(x, "coords", x), dtype=np.float64)
    if y.shape != x.shape:
        raise ContractError(f"loss_ad needs matching shapes, got {y.shape} vs {x.shape}")
    diff = ad.sub(y, Tensor(x))
    return ad.mean(ad.reduce_sum(ad.mul(diff, diff), axis=1))


def loss_total(y: Tensor, gt, x, alpha: float = 0.9, beta: float = 0.1,
               anchor: str = "input") -> Tensor:
    """alpha * Chamfer + beta * displacement. anchor='matched_gt' swaps the
    displacement target from the noisy input to index-matched ground truth."""
    if anchor == "input":
        target = x
    elif anchor == "matched_gt":
        target = gt
    else:
        raise ArgumentError(f"unknown loss anchor '{anchor}'")
    return ad.add(ad.mul(loss_cd(y, gt), alpha), ad.mul(loss_ad(y, target), beta))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive updates with lr halved every `halve_every` epochs."""

    def __init__(self, weights: ModelWeights, base_lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 halve_every: int = 50):
        self.weights = weights
        self.base_lr = float(base_lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.halve_every = int(halve_every)
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in weights.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in weights.params.items()}

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * 0.5 ** (epoch // self.halve_every)

    def step(self, epoch: int = 0) -> None:
        """Apply one update from the grads currently on the weights."""
        grads = {}
        for name, t in self.weights.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'; step refused")
            grads[name] = g
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        lr = self.lr_at(epoch)
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / corr1
            vhat = v / corr2
            self.weights[name].data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    # checkpoint support -----------------------------------------------------
    def state_bytes(self) -> bytes:
        parts = [self.step_count.to_bytes(8, "little")]
        for name in self.weights.names():
            parts.append(self.m[name].astype("<f8").tobytes())
            parts.append(self.v[name].astype("<f8").tobytes())
        return b"".join(parts)

    def load_state_bytes(self, blob: bytes) -> None:
        self.step_count = int.from_bytes(blob[:8], "little")
        pos = 8
        for name in self.weights.names():
            n = self.m[name].size
            for store in (self.m, self.v):
                end = pos + 8 * n
                if end > len(blob):
                    raise ContractError("optimizer state truncated")
                store[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(
                    store[name].shape
                ).copy()
                pos = end
        if pos != len(blob):
            raise ContractError("optimizer state has trailing bytes")


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    name: str
    noise: str
    cd: float
    p2m: float
    iterations: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_hash: str = ""

    def aggregate(self) -> tuple[float, float]:
        if not self.rows:
            raise ContractError("empty evaluation report")
        return (
            float(np.mean([r.cd for r in self.rows])),
            float(np.mean([r.p2m for r in self.rows])),
        )

    def to_text(self) -> str:
        lines = [
            f"{'shape':<24} {'noise':<20} {'CD':>14} {'CDx1e4':>12} "
            f"{'P2M':>14} {'P2Mx1e4':>12} {'iters':>6}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.name:<24} {r.noise:<20} {r.cd:>14.6e} {r.cd * 1e4:>12.4f} "
                f"{r.p2m:>14.6e} {r.p2m * 1e4:>12.4f} {r.iterations:>6d}"
            )
        cd, p2m = self.aggregate()
        lines.append(
            f"{'MEAN':<24} {'':<20} {cd:>14.6e} {cd * 1e4:>12.4f} "
            f"{p2m:>14.6e} {p2m * 1e4:>12.4f} {'':>6}"
        )
        if self.config_hash:
            lines.append(f"config: {self.config_hash}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = []
        for r in self.rows:
            out.append(json.dumps({
                "name": r.name, "noise": r.noise, "cd": r.cd,
                "cd_x1e4": r.cd * 1e4, "p2m": r.p2m, "p2m_x1e4": r.p2m * 1e4,
                "iterations": r.iterations,
            }, sort_keys=True))
        cd, p2m = self.aggregate()
        out.append(json.dumps({
            "name": "__aggregate__", "cd": cd, "cd_x1e4": cd * 1e4,
            "p2m": p2m, "p2m_x1e4": p2m * 1e4, "config": self.config_hash,
        }, sort_keys=True))
        return "\n".join(out) + "\n"
