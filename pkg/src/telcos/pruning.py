"""Channel pruning guided by activation similarity (SSIM) and sparsity (APoZ).

Tap channels are traced back to the convolution row that produces them.
Removing that row removes the channel everywhere it flows: through
depthwise convolutions, slices, concatenations, fixed permutations and
upsampling, up to the input columns of the next ordinary convolution.
Surviving weights are copied verbatim.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import squareform

from .netgraph import PRUNABLE_TAPS, NetworkSpec, forward, param_count, preprocess

log = logging.getLogger(__name__)

__all__ = [
    "ActivationProfile",
    "ChannelGroup",
    "PrunePlan",
    "PruneError",
    "collect_activations",
    "ssim",
    "pairwise_ssim",
    "mean_ssim_matrix",
    "group_channels",
    "apoz",
    "make_prune_plan",
    "plan_for_taps",
    "propagate_plan",
    "apply_plan",
    "predicted_param_decrease",
    "prunable_channels",
    "apply_and_finetune",
    "IterationRecord",
    "SSIM_WINDOW",
    "ZERO_EPS",
]

SSIM_WINDOW = 7
C1 = 0.01**2
C2 = 0.03**2
ZERO_EPS = 1e-12


class PruneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# profiling


@dataclass
class ActivationProfile:
    maps: dict[str, np.ndarray]  # tap -> (R, C, H, W)

    @property
    def taps(self) -> list[str]:
        return list(self.maps)

    def channels(self, tap: str) -> int:
        return self.maps[tap].shape[1]


def collect_activations(net: NetworkSpec, images: Sequence[np.ndarray], taps: Sequence[str], batch: int = 4) -> ActivationProfile:
    """Forward ``images`` (uint8 HxWx3, equal sizes) and record every channel of every tap."""
    if not len(images):
        raise ValueError("representative set is empty")
    unknown = [t for t in taps if t not in net.nodes]
    if unknown:
        raise KeyError(f"unknown tap(s): {unknown}")
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    for i in range(0, len(images), batch):
        out = forward(net, preprocess(list(images[i : i + batch])), "train", capture=taps)
        for t in taps:
            chunks[t].append(out.taps[t].astype(np.float64))
    return ActivationProfile({t: np.concatenate(v) for t, v in chunks.items()})


# ---------------------------------------------------------------------------
# similarity


def _normalize(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-map min-max scaling over the last two axes; constant maps become zeros."""
    lo = maps.min(axis=(-2, -1), keepdims=True)
    hi = maps.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    const = span[..., 0, 0] <= 0
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (maps - lo) / safe, 0.0), const


def _box_mean(a: np.ndarray, win: tuple[int, int]) -> np.ndarray:
    """Mean over every fully contained win window of the last two axes."""
    wh, ww = win
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., wh:, ww:] - c[..., :-wh, ww:] - c[..., wh:, :-ww] + c[..., :-wh, :-ww]
    return s / (wh * ww)


def _window(shape) -> tuple[int, int]:
    return min(SSIM_WINDOW, shape[-2]), min(SSIM_WINDOW, shape[-1])


def _ssim_normalized(x: np.ndarray, y: np.ndarray, win) -> np.ndarray:
    mx, my = _box_mean(x, win), _box_mean(y, win)
    vx = _box_mean(x * x, win) - mx * mx
    vy = _box_mean(y * y, win) - my * my
    cov = _box_mean(x * y, win) - mx * my
    num = (2 * mx * my + C1) * (2 * cov + C2)
    den = (mx * mx + my * my + C1) * (vx + vy + C2)
    return (num / den).mean(axis=(-2, -1))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM of two equally sized maps after per-map min-max scaling.

    Two constant maps score 1 when equal and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal 2-D maps, got {a.shape} and {b.shape}")
    (na, ca), (nb, cb) = _normalize(a), _normalize(b)
    if ca and cb:
        return 1.0 if np.array_equal(a, b) else 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(_ssim_normalized(na, nb, _window(a.shape)))


def pairwise_ssim(maps: np.ndarray) -> np.ndarray:
    """(C, H, W) -> symmetric (C, C) SSIM matrix with unit diagonal."""
    maps = np.asarray(maps, dtype=np.float64)
    c = maps.shape[0]
    norm, const = _normalize(maps)
    win = _window(maps.shape)
    mu = _box_mean(norm, win)
    var = _box_mean(norm * norm, win) - mu * mu
    out = np.eye(c)
    for i in range(c - 1):
        j = slice(i + 1, c)
        cov = _box_mean(norm[i] * norm[j], win) - mu[i] * mu[j]
        num = (2 * mu[i] * mu[j] + C1) * (2 * cov + C2)
        den = (mu[i] ** 2 + mu[j] ** 2 + C1) * (var[i] + var[j] + C2)
        row = (num / den).mean(axis=(-2, -1))
        for k, jj in enumerate(range(i + 1, c)):
            if np.array_equal(maps[i], maps[jj]):
                row[k] = 1.0
            elif const[i] and const[jj]:
                row[k] = 0.0
        out[i, j] = row
        out[j, i] = row
    return out


def mean_ssim_matrix(profile: ActivationProfile, tap: str) -> np.ndarray:
    maps = profile.maps[tap]
    return np.mean([pairwise_ssim(m) for m in maps], axis=0)


@dataclass
class ChannelGroup:
    tap: str
    members: list[int]
    ssim: np.ndarray  # members x members mean SSIM


def group_channels(profile: ActivationProfile, tap: str, tau: float, method: str = "connected", sim: np.ndarray | None = None) -> list[ChannelGroup]:
    """Partition a tap's channels by mean SSIM >= tau.

    ``connected`` takes connected components of the threshold graph;
    ``complete`` uses complete-linkage clustering cut at the same level.
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    s = mean_ssim_matrix(profile, tap) if sim is None else sim
    c = s.shape[0]
    if method == "connected":
        _, labels = connected_components(s >= tau, directed=False)
    elif method == "complete":
        if c == 1:
            labels = np.zeros(1, dtype=int)
        else:
            d = np.clip(1.0 - s, 0.0, None)
            np.fill_diagonal(d, 0.0)
            labels = fcluster(linkage(squareform(d, checks=False), "complete"), 1.0 - tau, "distance")
    else:
        raise ValueError(f"unknown grouping method {method!r}")
    groups: dict[int, list[int]] = {}
    for ch, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(ch)
    out = [ChannelGroup(tap, m, s[np.ix_(m, m)]) for m in groups.values()]
    out.sort(key=lambda g: g.members[0])
    return out


def apoz(profile: ActivationProfile, tap: str, channel: int | None = None):
    """Fraction of activations <= 1e-12 for one channel (or all channels as an array)."""
    maps = profile.maps[tap]
    frac = (maps <= ZERO_EPS).mean(axis=(0, 2, 3))
    return frac if channel is None else float(frac[channel])


# ---------------------------------------------------------------------------
# plans


@dataclass
class PrunePlan:
    taps: dict[str, dict] = field(default_factory=dict)  # tap -> {"remove", "apoz", "ssim", ...}
    rows: dict[str, list[int]] = field(default_factory=dict)  # conv -> removed output rows
    cols: dict[str, list[int]] = field(default_factory=dict)  # conv -> removed input columns
    depthwise: dict[str, list[int]] = field(default_factory=dict)  # dwconv -> removed channels
    closed: bool = False

    @property
    def empty(self) -> bool:
        return not any(v["remove"] for v in self.taps.values()) and not any(self.rows.values())

    def removed(self, tap: str) -> list[int]:
        return self.taps.get(tap, {}).get("remove", [])

    def to_json(self) -> dict:
        return {
            "taps": self.taps,
            "rows": self.rows,
            "cols": self.cols,
            "depthwise": self.depthwise,
            "closed": self.closed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PrunePlan":
        return cls(d.get("taps", {}), d.get("rows", {}), d.get("cols", {}), d.get("depthwise", {}), bool(d.get("closed", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PrunePlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5 + 1e-9))


def make_prune_plan(groups: Sequence[ChannelGroup], profile: ActivationProfile, k: float = 0.2, x: float = 0.1) -> PrunePlan:
    """Per group: round(x*g) highest-APoZ channels, then round((k-x)*g) highest mean intra-group SSIM.

    Ties go to the lower channel index; every group keeps at least one channel.
    """
    if not 0 <= x <= k <= 1:
        raise ValueError(f"need 0 <= x <= k <= 1, got k={k}, x={x}")
    plan = PrunePlan()
    for g in groups:
        entry = plan.taps.setdefault(g.tap, {"remove": [], "apoz": [], "ssim": []})
        size = len(g.members)
        n_apoz = _round_half_up(x * size)
        n_ssim = _round_half_up((k - x) * size)
        if n_apoz + n_ssim > size - 1:
            if n_apoz + n_ssim > 0 and size > 1:
                log.warning("group of %d in %s: clamping %d removals to %d", size, g.tap, n_apoz + n_ssim, size - 1)
            n_apoz = min(n_apoz, size - 1)
            n_ssim = size - 1 - n_apoz if n_apoz + n_ssim > size - 1 else n_ssim
        if n_apoz + n_ssim == 0:
            continue
        z = apoz(profile, g.tap)[g.members]
        order = sorted(range(size), key=lambda i: (-z[i], g.members[i]))
        by_apoz = order[:n_apoz]
        rest = [i for i in range(size) if i not in by_apoz]
        if size > 1:
            intra = (g.ssim.sum(axis=1) - np.diag(g.ssim)) / (size - 1)
        else:
            intra = np.zeros(1)
        by_ssim = sorted(rest, key=lambda i: (-intra[i], g.members[i]))[:n_ssim]
        entry["apoz"] += [g.members[i] for i in by_apoz]
        entry["ssim"] += [g.members[i] for i in by_ssim]
    for entry in plan.taps.values():
        entry["apoz"].sort()
        entry["ssim"].sort()
        entry["remove"] = sorted(entry["apoz"] + entry["ssim"])
    return plan


def plan_for_taps(
    profile: ActivationProfile,
    taps: Sequence[str],
    k: float = 0.2,
    x: float = 0.1,
    tau: float | None = None,
    method: str = "connected",
    tau_start: float = 0.7,
    tau_step: float = 0.05,
) -> PrunePlan:
    """Group and select per tap.  With ``tau=None`` the threshold descends from
    ``tau_start`` until the tap reaches round(k * C) removals (or tau hits 0)."""
    plan = PrunePlan()
    for tap in taps:
        sim = mean_ssim_matrix(profile, tap)
        c = sim.shape[0]
        target = _round_half_up(k * c)
        t = tau_start if tau is None else tau
        while True:
            part = make_prune_plan(group_channels(profile, tap, t, method, sim), profile, k, x)
            got = len(part.removed(tap))
            if tau is not None or got >= target or t - tau_step <= 0:
                break
            t = round(t - tau_step, 10)
        entry = part.taps.get(tap, {"remove": [], "apoz": [], "ssim": []})
        if len(entry["remove"]) < target:
            log.warning("%s: %d of %d target removals at tau=%.2f", tap, len(entry["remove"]), target, t)
        entry["tau"] = t
        plan.taps[tap] = entry
    return plan


# ---------------------------------------------------------------------------
# propagation


def _origin(net: NetworkSpec, node_name: str, ch: int, widths: dict[str, int]) -> tuple[str, int]:
    node = net.nodes[node_name]
    while node.op != "conv":
        if node.op == "permute":
            ch = int(node.perm[ch])
        elif node.op == "slice":
            ch = node.start + ch
        elif node.op == "concat":
            for src in node.inputs:
                if ch < widths[src]:
                    break
                ch -= widths[src]
            node = net.nodes[src]
            continue
        elif node.op == "input":
            raise PruneError("input channels cannot be pruned")
        node = net.nodes[node.inputs[0]]
    return node.name, ch


def _closure(net: NetworkSpec, rows: dict[str, set[int]]) -> dict[str, set[int]]:
    """Removed output channels (original numbering) of every node."""
    removed: dict[str, set[int]] = {}
    widths = net.channels()
    for node in net.nodes.values():
        if node.op == "input":
            removed[node.name] = set()
        elif node.op == "conv":
            removed[node.name] = set(rows.get(node.name, ()))
        elif node.op in ("dwconv", "upsample"):
            removed[node.name] = set(removed[node.inputs[0]])
        elif node.op == "slice":
            removed[node.name] = {i - node.start for i in removed[node.inputs[0]] if node.start <= i < node.stop}
        elif node.op == "concat":
            out, off = set(), 0
            for src in node.inputs:
                out |= {i + off for i in removed[src]}
                off += widths[src]
            removed[node.name] = out
        elif node.op == "permute":
            src = removed[node.inputs[0]]
            removed[node.name] = {p for p, q in enumerate(node.perm) if int(q) in src}
        if len(removed[node.name]) >= widths[node.name] and node.op != "input":
            raise PruneError(f"plan removes every channel of {node.name}")
    return removed


def propagate_plan(net: NetworkSpec, plan: PrunePlan, require_even_split: bool = False) -> PrunePlan:
    """Close a tap-level plan over the graph: producer rows, consumer columns, depthwise channels."""
    widths = net.channels()
    rows: dict[str, set[int]] = {k: set(v) for k, v in plan.rows.items()}
    for tap, entry in plan.taps.items():
        if tap not in net.nodes:
            raise PruneError(f"unknown tap {tap!r}")
        for ch in entry["remove"]:
            if not 0 <= ch < widths[tap]:
                raise PruneError(f"channel {ch} out of range for {tap} ({widths[tap]} channels)")
            conv, row = _origin(net, tap, ch, widths)
            rows.setdefault(conv, set()).add(row)
    removed = _closure(net, rows)
    if require_even_split:
        for node in net.nodes.values():
            if node.op == "slice" and node.name.endswith(".x1"):
                src = node.inputs[0]
                if (widths[src] - len(removed[src])) % 2:
                    raise PruneError(f"pruning leaves an odd channel count at the split in {node.name.rsplit('.', 1)[0]}")
    out = PrunePlan(dict(plan.taps), {}, {}, {}, True)
    for node in net.nodes.values():
        if node.op == "conv":
            if removed[node.name]:
                out.rows[node.name] = sorted(removed[node.name])
            if removed[node.inputs[0]]:
                out.cols[node.name] = sorted(removed[node.inputs[0]])
        elif node.op == "dwconv" and removed[node.name]:
            out.depthwise[node.name] = sorted(removed[node.name])
    return out


def predicted_param_decrease(net: NetworkSpec, plan: PrunePlan) -> int:
    """Weights that ``apply_plan`` will delete, computed from the closed plan and layer shapes."""
    if not plan.closed:
        raise PruneError("plan must be propagated first")
    total = 0
    for name, p in net.params.items():
        node = net.nodes[name]
        w = p["weight"].shape
        if node.op == "conv":
            cout, cin, kh, kw = w
            r, c = len(plan.rows.get(name, ())), len(plan.cols.get(name, ()))
            total += cout * cin * kh * kw + cout - ((cout - r) * (cin - c) * kh * kw + (cout - r))
        else:
            total += len(plan.depthwise.get(name, ())) * w[2] * w[3]
    return total


def apply_plan(net: NetworkSpec, plan: PrunePlan) -> NetworkSpec:
    """New network with the closed plan's channels removed; survivors copied verbatim."""
    if not plan.closed:
        plan = propagate_plan(net, plan)
    rows = {k: set(v) for k, v in plan.rows.items()}
    removed = _closure(net, rows)
    new = net.copy()
    for node in new.nodes.values():
        name = node.name
        if node.op == "conv":
            p = new.params[name]
            keep_r = np.setdiff1d(np.arange(p["weight"].shape[0]), sorted(removed[name]))
            keep_c = np.setdiff1d(np.arange(p["weight"].shape[1]), sorted(removed[node.inputs[0]]))
            p["weight"].data = np.ascontiguousarray(p["weight"].data[keep_r][:, keep_c])
            p["bias"].data = np.ascontiguousarray(p["bias"].data[keep_r])
        elif node.op == "dwconv":
            p = new.params[name]
            keep = np.setdiff1d(np.arange(p["weight"].shape[0]), sorted(removed[name]))
            p["weight"].data = np.ascontiguousarray(p["weight"].data[keep])
        elif node.op == "slice":
            src = removed[node.inputs[0]]
            node.start -= sum(1 for i in src if i < node.start)
            node.stop = net.nodes[name].stop - sum(1 for i in src if i < net.nodes[name].stop)
        elif node.op == "permute":
            src = sorted(removed[node.inputs[0]])
            kept = [int(q) for p, q in enumerate(net.nodes[name].perm) if p not in removed[name]]
            node.perm = np.array([q - int(np.searchsorted(src, q)) for q in kept], dtype=np.int64)
    if new.config != "custom" and not plan.empty:
        new.config = f"{new.config}-pruned"
    return new


def prunable_channels(net: NetworkSpec, taps: Sequence[str] = PRUNABLE_TAPS) -> int:
    ch = net.channels()
    return sum(ch[t] for t in taps)


# ---------------------------------------------------------------------------
# iterative pruning


@dataclass
class IterationRecord:
    taps: list[str]
    removed: dict[str, list[int]]
    params_before: int
    params_after: int
    metric_before: float | None
    metric_after: float | None
    rolled_back: bool
    finetune: dict | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def apply_and_finetune(
    net: NetworkSpec,
    rep_images: Sequence[np.ndarray],
    taps: Sequence[str] = PRUNABLE_TAPS,
    k: float = 0.2,
    x: float = 0.1,
    tau: float | None = None,
    per_iteration: int = 3,
    finetune: Callable[[NetworkSpec], dict] | None = None,
    metric: Callable[[NetworkSpec], float] | None = None,
    guard: float | None = None,
    method: str = "connected",
) -> tuple[NetworkSpec, list[IterationRecord]]:
    """Prune ``taps`` in chunks of at most ``per_iteration``, fine-tuning after each.

    ``finetune(net)`` trains in place and returns a summary; ``metric(net)``
    scores a network (higher is better).  An iteration whose metric falls
    more than ``guard`` below the pre-iteration score is rolled back.
    """
    if not 1 <= per_iteration <= 3:
        raise ValueError("prune between one and three taps per iteration")
    records = []
    current = net
    for i in range(0, len(taps), per_iteration):
        chunk = list(taps[i : i + per_iteration])
        before = metric(current) if metric is not None else None
        profile = collect_activations(current, rep_images, chunk)
        plan = propagate_plan(current, plan_for_taps(profile, chunk, k, x, tau, method))
        candidate = apply_plan(current, plan)
        summary = finetune(candidate) if finetune is not None else None
        after = metric(candidate) if metric is not None else None
        rolled = guard is not None and before is not None and after is not None and after < before - guard
        rec = IterationRecord(
            chunk,
            {t: plan.removed(t) for t in chunk},
            param_count(current),
            param_count(candidate),
            before,
            after,
            bool(rolled),
            summary,
        )
        records.append(rec)
        log.info("pruned %s: %d -> %d params%s", chunk, rec.params_before, rec.params_after, " (rolled back)" if rolled else "")
        if not rolled:
            current = candidate
    return current, records
