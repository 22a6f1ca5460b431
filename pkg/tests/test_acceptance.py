"""Acceptance criteria 1-11, each reported on one summary line by conftest."""

import json
import statistics
import time

import numpy as np
import pytest

import gradcheck
from criteria import verdict
from test_netgraph import PINNED, TABLE
from test_pruning import TINY, random_plan
from telcos import numerics as nx
from telcos.cli import EXIT_OK, run
from telcos.losses import logcosh_pool_loss, pixel_ce_loss, soft_ce_loss
from telcos.netgraph import PRUNABLE_TAPS, WIDTH_TABLE, Widths, build_network, forward, param_count, preprocess
from telcos.pipeline import TOY_STUDENT_WIDTHS, TOY_WIDTHS, evaluate_detector
from telcos.pruning import (
    PruneError,
    _origin,
    apply_and_finetune,
    apply_plan,
    collect_activations,
    group_channels,
    make_prune_plan,
    predicted_param_decrease,
    propagate_plan,
    ssim,
)
from telcos.scriptid import ProjectionLayer, lsh_project
from telcos.synthgen import GenConfig, generate_dataset, procedural_background
from telcos.trainer import AugmentConfig, TrainConfig, distill_train, load_dataset, train

# --- toy experiment recipe ----------------------------------------------------------

TOY_GEN = GenConfig(words=(3, 6), length=(2, 4), scale=(2.6, 3.4), levels=("word",))
TOY_COUNT, TOY_TRAIN, TOY_SEED = 200, 160, 1
TOY_TRAIN_CFG = dict(
    epochs=20, lr=1e-3, halve_every=8, literal_momentum=True, batch_size=4, patience=100,
    augment=AugmentConfig(rotate=5, brightness=0.2, saturation=0.3),
)
FINETUNE_CFG = dict(epochs=1, lr=2.5e-4, literal_momentum=True, batch_size=4, epoch_fraction=0.5, restore_best=False, patience=100)
STUDENT_CFG = dict(lr=1e-3, halve_every=8, literal_momentum=True, batch_size=4, patience=100,
                   augment=AugmentConfig(rotate=5, brightness=0.2, saturation=0.3))
STUDENT_PHASES = (6, 6)
TIME_BUDGET = 30 * 60


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Generate the toy set, train the tiny detector once, and score it."""
    t0 = time.perf_counter()
    out = tmp_path_factory.mktemp("toy")
    bgs = [procedural_background(160, 160, np.random.default_rng(i)) for i in range(20)]
    generate_dataset(bgs, TOY_COUNT, TOY_SEED, out, TOY_GEN)
    data = load_dataset(out)
    tr, te = data[:TOY_TRAIN], data[TOY_TRAIN:]
    net = build_network(TOY_WIDTHS, seed=0)
    train(net, tr, TrainConfig(**TOY_TRAIN_CFG))
    r5, r8 = evaluate_detector(net, te, 0.5), evaluate_detector(net, te, 0.8)
    return {"net": net, "train": tr, "test": te, "r5": r5, "r8": r8, "seconds": time.perf_counter() - t0}


# --- 1 ---------------------------------------------------------------------------------


def test_criterion_01_shape_contract():
    t0 = time.perf_counter()
    net = build_network(TINY, seed=0)
    bad = []
    for h, w in [(32, 32), (64, 96), (96, 64), (128, 160), (32, 224)]:
        img = preprocess(np.zeros((h, w, 3), np.uint8))
        tr_out, inf = forward(net, img, "train"), forward(net, img, "infer")
        want_s, want_l = (1, 4, h // 2, w // 2), (1, 2, h // 2, w // 2)
        if tr_out.script.shape != want_s or tr_out.loc.shape != want_l or inf.script.shape != want_s or inf.loc is not None:
            bad.append((h, w))
    dt = time.perf_counter() - t0
    verdict(1, not bad and dt < 1.0, f"5 sizes, mismatches {bad}, {dt:.2f}s (limit 1s)")


# --- 2 ---------------------------------------------------------------------------------


def _weighted_by(op, seed):
    """Scalarize a tensor op with fixed random weights so every output entry is checked."""
    def build(ts):
        y = op(ts)
        return nx.total(nx.mul(y, nx.Tensor(np.random.default_rng(seed).normal(size=y.shape))))
    return build


def _away_from_zero(a):
    return a + np.sign(a) * 0.05


def _conv(rng, depthwise):
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(1, 3, 6, 5))
    if depthwise:
        return [x, rng.normal(size=(3, 1, 3, 3))], lambda ts: nx.depthwise_conv2d(ts[0], ts[1], stride, 1)
    pad = int(rng.integers(0, 2))
    return [x, rng.normal(size=(2, 3, 3, 3))], lambda ts: nx.conv2d(ts[0], ts[1], stride, pad)


def _permute(rng):
    perm = [int(v) for v in rng.permutation(5)]
    return [rng.normal(size=(1, 5, 2, 2))], lambda ts: nx.channel_permute(ts[0], perm)


def _pool(rng):
    h, w = (int(v) for v in rng.integers(3, 8, 2))
    return [rng.normal(size=(1, 2, h, w))], lambda ts: nx.avg_pool2(ts[0])


def _loss(rng, kind):
    if kind == "tl":
        gt = rng.random((1, 2, 4, 6))
        return [rng.normal(size=(1, 2, 4, 6)) * 2], lambda ts: logcosh_pool_loss(ts[0], gt).value
    if kind == "sd":
        y = np.eye(4)[rng.integers(0, 4, (3, 3))].transpose(2, 0, 1)[None]
        return [rng.normal(size=(1, 4, 3, 3)) * 2], lambda ts: pixel_ce_loss(ts[0], y).value
    q = nx._softmax(rng.normal(size=(1, 4, 3, 3)))
    return [rng.normal(size=(1, 4, 3, 3))], lambda ts: soft_ce_loss(ts[0], q, 2.0).value


GRAD_CASES = {
    "conv2d": lambda rng: _conv(rng, False),
    "depthwise_conv2d": lambda rng: _conv(rng, True),
    "add_bias": lambda rng: ([rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)], lambda ts: nx.add_bias(ts[0], ts[1])),
    "relu": lambda rng: ([_away_from_zero(rng.normal(size=(1, 2, 3, 3)))], lambda ts: nx.relu(ts[0])),
    "channel_split": lambda rng: ([rng.normal(size=(1, 6, 2, 2))], lambda ts: nx.channel_concat(*nx.channel_split(ts[0])[::-1])),
    "channel_slice": lambda rng: ([rng.normal(size=(1, 5, 2, 3))], lambda ts: nx.channel_slice(ts[0], 1, 4)),
    "channel_concat": lambda rng: ([rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 3, 2, 2))], lambda ts: nx.channel_concat(ts[0], ts[1])),
    "channel_shuffle": lambda rng: ([rng.normal(size=(1, 6, 2, 2))], lambda ts: nx.channel_shuffle(ts[0], 2)),
    "channel_permute": _permute,
    "avg_pool2": _pool,
    "bilinear_upsample2": lambda rng: ([rng.normal(size=(1, 2, 3, 4))], lambda ts: nx.bilinear_upsample2(ts[0])),
    "softmax_channels": lambda rng: ([rng.normal(size=(1, 4, 2, 3))], lambda ts: nx.softmax_channels(ts[0])),
    "log_softmax_channels": lambda rng: ([rng.normal(size=(1, 4, 2, 3))], lambda ts: nx.log_softmax_channels(ts[0])),
    "logcosh": lambda rng: ([rng.normal(size=(2, 3)) * 3], lambda ts: nx.logcosh(ts[0])),
    "matmul": lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], lambda ts: nx.matmul(ts[0], ts[1])),
    "stripe_max": lambda rng: ([rng.normal(size=(2, 3, 8, 4))], lambda ts: nx.stripe_max(ts[0], 4)),
    "add": lambda rng: ([rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], lambda ts: nx.add(ts[0], ts[1])),
    "sub": lambda rng: ([rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], lambda ts: nx.sub(ts[0], ts[1])),
    "mul": lambda rng: ([rng.normal(size=(2, 3)), rng.normal(size=(2, 3))], lambda ts: nx.mul(ts[0], ts[1])),
    "mean": lambda rng: ([rng.normal(size=(3, 4))], lambda ts: nx.mul(nx.mean(ts[0]), 3.0)),
    "logcosh_pool_loss": lambda rng: _loss(rng, "tl"),
    "pixel_ce_loss": lambda rng: _loss(rng, "sd"),
    "soft_ce_loss": lambda rng: _loss(rng, "soft"),
}
SCALAR_CASES = {"logcosh_pool_loss", "pixel_ce_loss", "soft_ce_loss", "mean"}


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    worst, failures = {}, []
    for name, make in GRAD_CASES.items():
        for seed in range(20):
            rng = np.random.default_rng([seed, len(name)])
            arrays, op = make(rng)
            build = op if name in SCALAR_CASES else _weighted_by(op, seed)
            err = gradcheck.check(build, arrays, eps=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
            if not err < 1e-4:
                failures.append((name, seed, err))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    verdict(2, not failures and dt < 60, f"{len(GRAD_CASES)} ops x 20 instances, worst rel err {worst[top]:.1e} ({top}), "
                                          f"{len(failures)} failures, {dt:.1f}s (limit 60s)")


# --- 3 ---------------------------------------------------------------------------------


def test_criterion_03_ssim_axioms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    self_err = sym_err = 0.0
    bound = 0.0
    for i in range(100):
        h, w = (int(v) for v in rng.integers(4, 24, 2))
        a = rng.normal(size=(h, w)) * rng.uniform(0.1, 10)
        b = rng.normal(size=(h, w)) if i % 2 else a + rng.normal(size=(h, w)) * 0.3
        self_err = max(self_err, abs(ssim(a, a) - 1.0))
        sym_err = max(sym_err, abs(ssim(a, b) - ssim(b, a)))
        bound = max(bound, abs(ssim(a, b)))
    dt = time.perf_counter() - t0
    ok = self_err <= 1e-12 and sym_err == 0.0 and bound <= 1.0 and dt < 10
    verdict(3, ok, f"100 pairs: max |ssim(x,x)-1| {self_err:.1e}, max asymmetry {sym_err:.1e}, max |ssim| {bound:.3f}, {dt:.2f}s")


# --- 4 ---------------------------------------------------------------------------------


def test_criterion_04_dead_channel_exactness():
    t0 = time.perf_counter()
    net = build_network(TINY, seed=4)
    tap, ch = "shuffle3", 5
    conv, row = _origin(net, tap, ch, net.channels())
    net.params[conv]["weight"].data[row] = 0
    net.params[conv]["bias"].data[row] = -1
    rng = np.random.default_rng(44)
    imgs = [rng.integers(0, 256, (64, 64, 3), dtype=np.uint8) for _ in range(16)]
    prof = collect_activations(net, imgs, [tap])
    dead = not prof.maps[tap][:, ch].any()
    c = prof.maps[tap].shape[1]
    groups = group_channels(prof, tap, 1e-6, sim=np.ones((c, c)))
    plan = propagate_plan(net, make_prune_plan(groups, prof, k=1 / c, x=1 / c))
    pruned = apply_plan(net, plan)
    same = True
    with nx.ordered_accumulation():
        for im in imgs:
            a, b = forward(net, preprocess(im)), forward(pruned, preprocess(im))
            same &= np.array_equal(a.script.data, b.script.data) and np.array_equal(a.loc.data, b.loc.data)
    dt = time.perf_counter() - t0
    ok = dead and plan.removed(tap) == [ch] and same and dt < 30
    verdict(4, ok, f"removed {plan.removed(tap)} from {tap}, outputs bit-identical on 16 images: {same}, {dt:.1f}s")


# --- 5 ---------------------------------------------------------------------------------


def test_criterion_05_pruning_arithmetic():
    t0 = time.perf_counter()
    rng = np.random.default_rng(55)
    checked, mismatches = 0, []
    while checked < 10:
        stages, prev = [], int(rng.integers(2, 7))
        c1 = prev
        for _ in range(4):
            out = 2 * int(rng.integers(2, 6))
            stages.append((prev, out))
            prev = out
        c2 = int(rng.integers(2, 9))
        u = [int(v) for v in rng.integers(2, 9, size=3)]
        w = Widths(c1, tuple(stages), c2, ((c2, u[0]), (u[0], u[1]), (u[1], u[2])), tuple(int(v) for v in rng.integers(2, 6, size=3)))
        net = build_network(w, seed=checked)
        try:
            plan = propagate_plan(net, random_plan(net, rng, n_taps=int(rng.integers(1, 4))))
        except PruneError:
            continue
        got = param_count(net) - param_count(apply_plan(net, plan))
        if got != predicted_param_decrease(net, plan):
            mismatches.append((checked, got, predicted_param_decrease(net, plan)))
        checked += 1
    dt = time.perf_counter() - t0
    verdict(5, not mismatches and dt < 30, f"10 random plans on random tiny configs, mismatches {mismatches}, {dt:.1f}s")


# --- 6 ---------------------------------------------------------------------------------


def test_criterion_06_width_table():
    wrong = []
    counts = {}
    for name in WIDTH_TABLE:
        net = build_network(name)
        if net.widths("loc") != TABLE[name] or net.widths("script") != dict(TABLE[name], conv6=4):
            wrong.append(name)
        counts[name] = tuple(param_count(net, s) for s in ("all", "backbone", "infer"))
    plus, stud, small = (counts[n][0] for n in ("telcos_plus", "telcos_stud", "telcos"))
    ordered = plus > stud > small and plus > 3e6 and stud > 1.4e6 and small > 1e6
    pinned = counts == PINNED
    verdict(6, not wrong and ordered and pinned,
            f"width mismatches {wrong}; params plus/stud/base {plus:,}/{stud:,}/{small:,}; pinned constants match: {pinned}")


# --- 7 ---------------------------------------------------------------------------------


def test_criterion_07_toy_end_to_end(toy):
    r5, r8 = toy["r5"], toy["r8"]
    acc = r5.overall_script_accuracy or 0.0
    ok = r5.hmean >= 0.80 and acc >= 0.85 and toy["seconds"] <= TIME_BUDGET
    verdict(7, ok, f"H@0.5 {r5.hmean:.3f} (>= 0.80), H@0.8 {r8.hmean:.3f} (reported), script accuracy {acc:.3f} (>= 0.85), "
                   f"{toy['seconds'] / 60:.1f} min (<= 30)")


# --- 8 ---------------------------------------------------------------------------------


def test_criterion_08_pruning_recovery(toy):
    net = toy["net"]
    before = toy["r5"].hmean
    ch0 = net.channels()
    cfg = TrainConfig(**FINETUNE_CFG)
    iterations = int(np.ceil(len(PRUNABLE_TAPS) / 3))
    budget = iterations * cfg.epochs * cfg.epoch_fraction

    def finetune(n):
        return {"epochs": len(train(n, toy["train"], cfg).epochs)}

    pruned, records = apply_and_finetune(net, [s.image for s in toy["train"][:32]], PRUNABLE_TAPS, 0.2, 0.1, finetune=finetune)
    ch1 = pruned.channels()
    removed = sum(ch0[t] - ch1[t] for t in PRUNABLE_TAPS) / sum(ch0[t] for t in PRUNABLE_TAPS)
    after = evaluate_detector(pruned, toy["test"], 0.5).hmean
    ok = removed >= 0.19 and budget <= 2 and after >= before - 0.02
    verdict(8, ok, f"removed {100 * removed:.1f}% of tap channels, params {param_count(net):,} -> {param_count(pruned):,}, "
                   f"fine-tune {budget:g} epochs, H@0.5 {before:.3f} -> {after:.3f} (within 0.02)")


# --- 9 ---------------------------------------------------------------------------------


def test_criterion_09_distillation_direction(toy):
    p1, p2 = STUDENT_PHASES
    distilled, scratch = [], []
    for seed in range(3):
        cfg = TrainConfig(epochs=p1 + p2, seed=seed, **STUDENT_CFG)
        stu, _ = distill_train(toy["net"], build_network(TOY_STUDENT_WIDTHS, seed=seed), toy["train"], cfg, p1, p2)
        distilled.append(evaluate_detector(stu, toy["test"], 0.5).hmean)
        ref = build_network(TOY_STUDENT_WIDTHS, seed=seed)
        train(ref, toy["train"], cfg)
        scratch.append(evaluate_detector(ref, toy["test"], 0.5).hmean)
    md, ms = statistics.median(distilled), statistics.median(scratch)
    verdict(9, md >= ms, f"median H@0.5 distilled {md:.3f} vs scratch {ms:.3f}; "
                         f"per seed {[round(v, 3) for v in distilled]} vs {[round(v, 3) for v in scratch]}")


# --- 10 --------------------------------------------------------------------------------


def test_criterion_10_lsh_angle_property():
    rng = np.random.default_rng(10)
    layer = ProjectionLayer(16, T=625, d=16, seed=10)  # 10^4 hyperplanes
    worst = 0.0
    for theta in np.linspace(0.1, np.pi - 0.1, 12):
        u = rng.normal(size=16)
        u /= np.linalg.norm(u)
        w = rng.normal(size=16)
        w -= (w @ u) * u
        w /= np.linalg.norm(w)
        v = np.cos(theta) * u + np.sin(theta) * w
        agree = float(np.mean(lsh_project(u, layer) == lsh_project(v, layer)))
        worst = max(worst, abs(agree - (1 - theta / np.pi)))
    verdict(10, layer.bits == 10_000 and worst <= 0.02, f"{layer.bits} planes, 12 angles, max |agreement - (1 - theta/pi)| {worst:.4f} (<= 0.02)")


# --- 11 --------------------------------------------------------------------------------


def test_criterion_11_cli_determinism(tmp_path):
    tiny = tmp_path / "tiny.json"
    tiny.write_text(json.dumps({"conv1": 8, "stages": [[8, 8], [8, 12], [12, 12], [12, 16]], "conv2": 16,
                                "upconv": [[16, 8], [8, 8], [8, 6]], "head": [6, 6, 4]}))
    data = tmp_path / "data"
    assert run(["synth", "--out", str(data), "--count", "6", "--procedural", "2", "--seed", "7"]) == EXIT_OK
    model = tmp_path / "model.tlcs"
    assert run(["train", "--data", str(data), "--out", str(model), "--widths", str(tiny), "--epochs", "1", "--batch-size", "2"]) == EXIT_OK
    sid = tmp_path / "sid.tlcs"
    assert run(["scriptid", "--model", str(model), "--data", str(data), "--out", str(sid), "--epochs", "1"]) == EXIT_OK
    ann = json.loads((data / "img_00002.json").read_text())
    det = tmp_path / "det.json"
    det.write_text(json.dumps([{"quad": w["quad"], "script": w["script"], "confidence": 1.0} for w in ann["words"][1:]]))
    train_flags = ["--epochs", "1", "--batch-size", "2", "--seed", "3"]
    commands = {
        "synth": (lambda d: ["synth", "--out", str(d / "s"), "--count", "2", "--procedural", "2", "--seed", "9"], ["s/manifest.json", "s/img_00001.json"]),
        "gt": (lambda d: ["gt", "--annotation", str(data / "img_00000.json"), "--out", str(d / "g")], ["g/gt.json"]),
        "train": (lambda d: ["train", "--data", str(data), "--out", str(d / "m.tlcs"), "--widths", str(tiny), "--report", str(d / "r.json"), *train_flags], ["r.json"]),
        "distill": (lambda d: ["distill", "--teacher", str(model), "--student", str(tiny), "--data", str(data), "--out", str(d / "s.tlcs"),
                               "--phase1", "1", "--phase2", "1", "--report", str(d / "r.json"), *train_flags], ["r.json"]),
        "prune": (lambda d: ["prune", "--model", str(model), "--data", str(data), "--rep-count", "3", "--out", str(d / "p.tlcs"),
                             "--report", str(d / "r.json"), "--finetune-data", str(data), "--epoch-fraction", "0.5", *train_flags], ["r.json"]),
        "infer": (lambda d: ["infer", "--model", str(model), "--image", str(data / "img_00001.ppm"), "--out", str(d / "d.json"),
                             "--scriptid", str(sid), "--t-text", "0.2"], ["d.json"]),
        "eval": (lambda d: ["eval", "--det", str(det), "--gt", str(data / "img_00002.json"), "--out", str(d / "e.json")], ["e.json"]),
        "scriptid": (lambda d: ["scriptid", "--model", str(model), "--data", str(data), "--out", str(d / "sid.tlcs"), "--epochs", "2",
                                "--report", str(d / "r.json"), "--seed", "4"], ["r.json"]),
    }
    differing = []
    for name, (argv, outputs) in commands.items():
        blobs = []
        for k in range(2):
            d = tmp_path / name / f"run{k}"
            d.mkdir(parents=True)
            assert run(argv(d)) == EXIT_OK, name
            blobs.append([(d / o).read_bytes() for o in outputs])
        if blobs[0] != blobs[1]:
            differing.append(name)
    verdict(11, not differing, f"{len(commands)} subcommands rerun, JSON outputs differing: {differing or 'none'}")
