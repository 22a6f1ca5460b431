"""Second-stage script identification for words the detector routes to "other".

Region features are cropped from the detector's conv2 map, pass a small
down/up convolution stack, and are max-pooled over horizontal stripes.
The teacher classifies the pooled vector with dense layers; the student
hashes it to bits with fixed random hyperplanes (LSH) and classifies the
bits with one affine layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .netgraph import NetworkSpec, forward, preprocess, read_container, write_container
from .numerics import Tensor

__all__ = [
    "FINE_CLASSES",
    "ROI_SIZE",
    "CONV2_STRIDE",
    "ProjectionLayer",
    "ScriptIdModel",
    "build_scriptid",
    "resize_bilinear",
    "roi_features",
    "ssp_pool",
    "lsh_project",
    "train_scriptid",
    "extract_crops",
    "save_crops",
    "load_crops",
    "reclassify_other",
    "accuracy",
]

FINE_CLASSES = ("latin", "hanzi")
ROI_SIZE = (8, 32)
CONV2_STRIDE = 16
N_STRIPES = 4
HASH_FUNCTIONS = 8
PLANES = 16


# ---------------------------------------------------------------------------
# featurization


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, h, w) -> (C, out_h, out_w) with half-pixel centres and edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    _, h, w = a.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = a[:, y0] * (1 - fy)[None, :, None] + a[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def roi_features(features, quad, stride: int = CONV2_STRIDE, size: tuple[int, int] = ROI_SIZE) -> np.ndarray:
    """Crop the quad's axis-aligned box from a (C, h, w) feature map and resize to ``size``.

    ``quad`` is in input pixels; the crop covers at least one feature cell.
    """
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"expected (C, h, w) features, got {f.shape}")
    _, h, w = f.shape
    q = np.asarray(quad, dtype=np.float64).reshape(4, 2) / stride
    x0 = int(np.clip(np.floor(q[:, 0].min()), 0, w - 1))
    y0 = int(np.clip(np.floor(q[:, 1].min()), 0, h - 1))
    x1 = int(np.clip(np.ceil(q[:, 0].max()), x0 + 1, w))
    y1 = int(np.clip(np.ceil(q[:, 1].max()), y0 + 1, h))
    return resize_bilinear(f[:, y0:y1, x0:x1], *size)


def ssp_pool(features, n_stripes: int = N_STRIPES):
    """Per-stripe channel maxima.  (C, H, W) arrays give a vector; (N, C, H, W) tensors a tensor."""
    if isinstance(features, Tensor):
        return nx.stripe_max(features, n_stripes)
    a = np.asarray(features, dtype=np.float64)
    return nx.stripe_max(Tensor(a[None]), n_stripes).data[0]


@dataclass
class ProjectionLayer:
    """``T`` hash functions of ``d`` seeded random hyperplanes each."""

    dim: int
    T: int = HASH_FUNCTIONS
    d: int = PLANES
    seed: int = 0
    planes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, self.dim, self.T, self.d])
        self.planes = rng.standard_normal((self.dim, self.T * self.d))

    @property
    def bits(self) -> int:
        return self.T * self.d

    def __call__(self, x: Tensor) -> Tensor:
        """Bits with a straight-through gradient, for training."""
        return nx.sign_ste(nx.matmul(x, Tensor(self.planes.astype(x.dtype))))


def lsh_project(x, layer: ProjectionLayer) -> np.ndarray:
    """Bit i is 1 iff dot(x, plane_i) >= 0."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("projection input must be finite")
    return (x @ layer.planes >= 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# model


class ScriptIdModel:
    """Teacher (dense head) or student (LSH projection head) over ROI features."""

    def __init__(self, kind: str, in_channels: int, classes: Sequence[str] = FINE_CLASSES, width: int = 16,
                 hidden: int = 64, n_stripes: int = N_STRIPES, T: int = HASH_FUNCTIONS, d: int = PLANES, seed: int = 0):
        if kind not in ("teacher", "student"):
            raise ValueError(f"kind must be 'teacher' or 'student', got {kind!r}")
        if len(set(classes)) != len(classes) or len(classes) < 2:
            raise ValueError(f"need at least two distinct classes, got {classes}")
        self.kind, self.in_channels, self.classes = kind, in_channels, tuple(classes)
        self.width, self.hidden, self.n_stripes, self.T, self.d, self.seed = width, hidden, n_stripes, T, d, seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def conv(name, cin, cout):
            self.params[f"{name}.weight"] = Tensor(rng.normal(0, math.sqrt(2 / (cin * 9)), (cout, cin, 3, 3)), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

        def dense(name, cin, cout, gain=2.0):
            self.params[f"{name}.weight"] = Tensor(rng.normal(0, math.sqrt(gain / cin), (cin, cout)), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

        conv("conv_a", in_channels, width)
        conv("down", width, width)
        conv("up", width, width)
        pooled = n_stripes * 2 * width
        k = len(self.classes)
        if kind == "teacher":
            dense("fc1", pooled, hidden)
            dense("fc2", hidden, k, 1.0)
            self.projection = None
        else:
            self.projection = ProjectionLayer(pooled, T, d, seed)
            dense("fc", self.projection.bits, k, 1.0)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, x, name, stride=1):
        y = nx.conv2d(x, self.params[f"{name}.weight"], stride, 1)
        return nx.relu(nx.add_bias(y, self.params[f"{name}.bias"]))

    def _dense(self, x, name):
        return nx.add_bias(nx.matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def pooled(self, x: Tensor) -> Tensor:
        """(N, C, H_r, W_r) crops -> (N, n_stripes * 2 * width) multi-level stripe maxima."""
        a = self._conv(x, "conv_a")
        b = self._conv(nx.bilinear_upsample2(self._conv(a, "down", 2)), "up")
        return ssp_pool(nx.channel_concat(a, b), self.n_stripes)

    def logits(self, x: Tensor) -> Tensor:
        v = self.pooled(x)
        if self.kind == "teacher":
            return self._dense(nx.relu(self._dense(v, "fc1")), "fc2")
        return self._dense(self.projection(v), "fc")

    def predict_proba(self, crops: np.ndarray) -> np.ndarray:
        crops = np.asarray(crops, dtype=np.float64)
        if crops.ndim == 3:
            crops = crops[None]
        return nx._softmax(self.logits(Tensor(crops)).data)

    def predict(self, crops: np.ndarray) -> list[str]:
        return [self.classes[i] for i in self.predict_proba(crops).argmax(axis=1)]

    def meta(self) -> dict:
        return {
            "kind": self.kind, "in_channels": self.in_channels, "classes": list(self.classes), "width": self.width,
            "hidden": self.hidden, "n_stripes": self.n_stripes, "T": self.T, "d": self.d, "seed": self.seed,
        }

    def save(self, path) -> None:
        write_container(path, json.dumps(self.meta(), sort_keys=True), [(k, t.data) for k, t in self.params.items()])

    @classmethod
    def load(cls, path) -> "ScriptIdModel":
        config, records = read_container(path)
        try:
            meta = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a script-id checkpoint") from exc
        model = cls(**meta)
        names = {k for k, _ in records}
        if names != set(model.params):
            raise ValueError(f"{path}: layer records {sorted(names ^ set(model.params))[:3]} do not match the model")
        for k, arr in records:
            if arr.shape != model.params[k].shape:
                raise ValueError(f"{path}: {k} has shape {arr.shape}, expected {model.params[k].shape}")
            model.params[k].data = arr.astype(np.float64)
        return model


def build_scriptid(kind: str, in_channels: int, classes: Sequence[str] = FINE_CLASSES, seed: int = 0, **kw) -> ScriptIdModel:
    return ScriptIdModel(kind, in_channels, classes, seed=seed, **kw)


# ---------------------------------------------------------------------------
# training


def _ce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits))."""
    logp = nx.log_softmax_channels(logits)
    n = logits.shape[0]
    return nx.total(nx.mul(logp, Tensor(-target / n)))


def accuracy(model: ScriptIdModel, crops: np.ndarray, labels: Sequence[int]) -> float:
    if not len(labels):
        return 0.0
    pred = model.predict_proba(crops).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train_scriptid(
    student: ScriptIdModel,
    crops: np.ndarray,
    labels: Sequence[int],
    teacher: ScriptIdModel | None = None,
    lam_t: float = 0.5,
    epochs: int = 20,
    lr: float = 3e-3,
    batch_size: int = 16,
    temperature: float = 1.0,
    seed: int = 0,
) -> dict:
    """Train ``student`` with lam_t * CE(teacher soft labels) + (1 - lam_t) * CE(labels).

    With ``teacher=None`` the distillation term is absent and ``lam_t`` must be 0.
    Returns per-epoch means of both components and training accuracy.
    """
    from .trainer import Adam

    if not 0.0 <= lam_t <= 1.0:
        raise ValueError(f"lam_t must lie in [0, 1], got {lam_t}")
    if teacher is None and lam_t > 0:
        raise ValueError("distillation weight needs a teacher")
    crops = np.asarray(crops, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(student.classes)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside the configured classes {student.classes}")
    if teacher is not None and teacher.classes != student.classes:
        raise ValueError("teacher and student class sets differ")
    onehot = np.eye(k)[labels]
    soft = None
    if teacher is not None and lam_t > 0:
        soft = nx._softmax(teacher.logits(Tensor(crops)).data / temperature)
    params = student.parameters()
    opt = Adam(params)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(crops))
        sums = {"distill": 0.0, "supervised": 0.0, "total": 0.0}
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            x = Tensor(crops[idx])
            with nx.GradTape() as tape:
                logits = student.logits(x)
                sup = _ce(logits, onehot[idx])
                if soft is not None:
                    dist = _ce(nx.mul(logits, Tensor(np.array(1.0 / temperature))), soft[idx])
                    loss = nx.add(nx.mul(dist, Tensor(np.array(lam_t * temperature**2))), nx.mul(sup, Tensor(np.array(1.0 - lam_t))))
                else:
                    dist = None
                    loss = sup
            opt.step(tape.backward(loss, params), lr)
            w = len(idx) / len(order)
            sums["supervised"] += w * float(sup.data)
            sums["distill"] += w * (float(dist.data) if dist is not None else 0.0)
            sums["total"] += w * float(loss.data)
        history.append({"epoch": epoch, **{k2: round(v, 6) for k2, v in sums.items()}, "accuracy": round(accuracy(student, crops, labels), 6)})
    return {"lam_t": lam_t, "temperature": temperature, "epochs": history}


# ---------------------------------------------------------------------------
# crops


def extract_crops(net: NetworkSpec, samples, classes: Sequence[str] = FINE_CLASSES) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """ROI features from conv2 for every annotated word whose fine script is in ``classes``."""
    crops, labels, names = [], [], []
    for s in samples:
        conv2 = forward(net, preprocess(s.image), "infer", capture=["conv2"]).taps["conv2"][0]
        for j, wd in enumerate(s.words):
            if wd.fine_script not in classes:
                continue
            crops.append(roi_features(conv2, wd.quad))
            labels.append(classes.index(wd.fine_script))
            names.append(f"{s.name}:{j}")
    if not crops:
        raise ValueError("no words with a configured fine script")
    return np.stack(crops), np.asarray(labels), names


def save_crops(directory, crops: np.ndarray, labels: Sequence[int], classes: Sequence[str], names: Sequence[str] | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (c, lab) in enumerate(zip(crops, labels)):
        fn = f"crop_{i:05d}.tns"
        nx.save_tensor(d / fn, c)
        items.append({"file": fn, "label": classes[int(lab)], "name": names[i] if names else fn})
    (d / "labels.json").write_text(json.dumps({"classes": list(classes), "items": items}, indent=1, sort_keys=True) + "\n")


def load_crops(directory) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    d = Path(directory)
    doc = json.loads((d / "labels.json").read_text())
    classes = tuple(doc["classes"])
    crops, labels = [], []
    for it in doc["items"]:
        if it["label"] not in classes:
            raise ValueError(f"{d}: label {it['label']!r} outside classes {classes}")
        crops.append(nx.load_tensor(d / it["file"]))
        labels.append(classes.index(it["label"]))
    return np.stack(crops), np.asarray(labels), classes


def reclassify_other(words, conv2: np.ndarray, model: ScriptIdModel, stride: int = CONV2_STRIDE):
    """Copies of ``words`` where those routed to "other" carry a fine script; quads are untouched."""
    from dataclasses import replace

    from .groundtruth import Script

    out = []
    for wd in words:
        if wd.script == Script.OTHER:
            label = model.predict(roi_features(conv2, wd.quad, stride))[0]
            wd = replace(wd, quad=wd.quad.copy(), fine_script=label)
        out.append(wd)
    return out
