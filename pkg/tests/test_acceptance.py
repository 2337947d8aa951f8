"""End-to-end acceptance checks for the whole evaluation engine.

Each test covers one release gate and prints a single PASS/FAIL line with
the measured margin, so a verbose run doubles as a scorecard:

  gradient-check          analytic grads vs central finite differences
  ig-completeness         attribution sum telescopes to the score delta
  gradcam-linearity       contrastive maps decompose, ReLU omitted
  metric-oracle           CCS/CGC/PGS/CGS/Deletion vs brute-force enumeration
  normalization-identity  full-set PGS is zero, CGS negates under swap
  separation              informed explainers beat random on a trained model
  objective-match         group-matched maps outscore mismatched ones
  fill-robustness         informed-vs-random ordering survives the fill choice
  group-construction      semantic grouping reproduces a hand-traced table
  determinism             identical configs reproduce identical bytes
  bridge-parity           subprocess scorer matches the in-process model
  bridge-fuzz             malformed frames never kill the bridge

The trained model fixture is shared and seeded; everything here must run
on an ordinary laptop CPU.
"""

import base64
import json
import pathlib
import subprocess
import sys
import threading
import time
from types import SimpleNamespace

import numpy as np
import pytest

from oracles import (
    brute_force_metric,
    fd_activation_coordinates,
    fd_input_coordinates,
    max_relative_error,
    objective_value,
)
from rfxg.config import ExperimentConfig
from rfxg.core import ImageTensor, MaskFill, SaliencyMap
from rfxg.dataset import SyntheticTaxonomy, generate_dataset
from rfxg.explainers import (
    PointwiseGroup,
    explain_gradcam,
    explain_gradient,
    explain_random,
    ig_channel_attributions,
    query_to_objective,
)
from rfxg.harness import METRIC_QUERY, compute_metric, queries_for, run_experiment, select_cases
from rfxg import metrics as mx
from rfxg.metrics import cgs, paired_t_test, pgs
from rfxg.model import ToyConvNet, save_checkpoint, train
from rfxg.ontology import build_groups, parse_hierarchy, read_hierarchy
from rfxg.remote import RemoteScorer

DATA = pathlib.Path(__file__).parent / "data"

GAP_METRICS = ("ccs", "cgc", "pgs", "cgs")
INFORMED = ("gradient", "integrated-gradients", "gradcam", "occlusion")


@pytest.fixture
def criterion(capsys):
    """Print one PASS/FAIL line per gate, bypassing output capture."""

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name:<24}{detail}"
        with capsys.disabled():
            print(line)
        assert ok, line

    return check


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Model trained once for the whole session; must clear 90% validation."""
    tax = SyntheticTaxonomy()
    data = generate_dataset(tax, 40, seed=0)
    model = ToyConvNet(tax.side, tax.side, 3, seed=0)
    t0 = time.perf_counter()
    history = train(model, data, epochs=40, batch=16, lr=0.1, seed=0)
    seconds = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("acceptance") / "model.net"
    save_checkpoint(model, path)
    return SimpleNamespace(
        model=model,
        tax=tax,
        table=build_groups(parse_hierarchy(tax.hierarchy_text())),
        checkpoint=path,
        val=history[-1].val_accuracy,
        train_seconds=seconds,
    )


@pytest.fixture(scope="session")
def cases(trained):
    """The 200-image test set, class-interleaved, with per-image case casts.

    Mirrors the evaluation harness's own ordering (seed+1, round-robin over
    classes) so every statistical gate runs on the same images an `eval`
    with seed 0 would see.
    """
    per_class = 10
    pool = generate_dataset(trained.tax, per_class, seed=1)
    n_classes = trained.tax.num_classes
    ordered = [pool[c * per_class + i] for i in range(per_class) for c in range(n_classes)]
    out = []
    for image, label in ordered:
        probs = trained.model.probs_batch(image.data[None])[0]
        sel, reason = select_cases(probs, trained.table)
        assert sel is not None, reason
        out.append(SimpleNamespace(image=image, label=label, probs=probs, sel=sel))
    assert len(out) == 200
    return out


def test_input_and_activation_gradients_match_finite_differences(trained, cases, criterion):
    t0 = time.perf_counter()
    worst_in, worst_act = 0.0, 0.0
    n = trained.tax.num_classes
    for i in range(10):
        pixels = cases[i].image.data
        rng = np.random.default_rng([11, i])
        if i % 2 == 0:
            w = np.zeros(n)
            w[cases[i].sel.class_a] = 1.0
        else:
            w = rng.normal(size=n)
        on_logits = i % 3 != 0
        pairs = fd_input_coordinates(trained.model, pixels, w, on_logits, 50, rng)
        assert len(pairs) >= 50
        worst_in = max(worst_in, max_relative_error(pairs))
        pairs = fd_activation_coordinates(trained.model, pixels, w, on_logits, 50, rng)
        assert len(pairs) >= 50
        worst_act = max(worst_act, max_relative_error(pairs))
    seconds = time.perf_counter() - t0
    ok = worst_in < 1e-3 and worst_act < 1e-3 and seconds < 60.0
    criterion(
        "gradient-check",
        ok,
        f"10 images x 50 coords, rel err input {worst_in:.2e} / "
        f"activation {worst_act:.2e}, {seconds:.1f}s",
    )


def test_integrated_gradients_completeness(trained, cases, criterion):
    n = trained.tax.num_classes
    zero = np.zeros((trained.tax.side, trained.tax.side, 3))
    worst = 0.0
    for i in range(20):
        image = cases[i].image
        w = np.zeros(n)
        w[cases[i].sel.class_a] = 1.0
        attr = ig_channel_attributions(trained.model, image, w, steps=256)
        delta = objective_value(trained.model, image.data, w, True) - objective_value(
            trained.model, zero, w, True
        )
        rel = abs(float(np.sum(attr)) - delta) / max(abs(delta), 1e-6)
        worst = max(worst, rel)

    # A dense-softmax scorer is linear in the input, so the midpoint rule is
    # exact and the telescoped sum must match to rounding error.
    lin = ToyConvNet(4, 4, 3, layers=(("dense", 5),), seed=8)
    img = ImageTensor(np.random.default_rng(8).random((4, 4, 3)))
    w = np.array([1.0, -1.0, 0.0, 0.5, 0.0])
    attr = ig_channel_attributions(lin, img, w, steps=8)
    delta = objective_value(lin, img.data, w, True) - objective_value(
        lin, np.zeros((4, 4, 3)), w, True
    )
    lin_err = abs(float(np.sum(attr)) - delta)

    ok = worst <= 0.01 and lin_err <= 1e-9
    criterion(
        "ig-completeness",
        ok,
        f"20 images at 256 steps, worst rel gap {worst:.2e}; linear fixture {lin_err:.1e}",
    )


def test_contrastive_gradcam_is_linear_in_the_objective(trained, cases, criterion):
    n = trained.tax.num_classes
    worst = 0.0
    for i in range(20):
        image = cases[i].image
        a, b = cases[i].sel.class_a, cases[i].sel.class_b
        wa = np.zeros(n)
        wa[a] = 1.0
        wb = np.zeros(n)
        wb[b] = 1.0
        joint = explain_gradcam(trained.model, image, wa - wb, apply_relu=False)
        left = explain_gradcam(trained.model, image, wa, apply_relu=False)
        right = explain_gradcam(trained.model, image, wb, apply_relu=False)
        worst = max(worst, float(np.max(np.abs(joint.values - (left.values - right.values)))))
    ok = worst <= 1e-6
    criterion("gradcam-linearity", ok, f"20 triples, worst elementwise gap {worst:.2e}")


def test_metrics_match_brute_force_enumeration(criterion):
    worst = 0.0
    for shape, classes, seed in (((2, 2, 1), 4, 3), ((4, 4, 3), 6, 4)):
        model = ToyConvNet(*shape, layers=(("dense", classes),), seed=seed)
        img = ImageTensor(np.random.default_rng(seed).random(shape))
        w = np.zeros(classes)
        w[0], w[1] = 1.0, -1.0
        sal = explain_gradient(model, img, w)

        weights = model.params[-2].tolist()
        bias = model.params[-1].tolist()
        pixels = img.data.tolist()
        values = sal.values.tolist()

        for name, params in (
            ("ccs", dict(target=0, alternative=1)),
            ("cgc", dict(target=0, rest={1, 2})),
            ("pgs", dict(group={0, 1, 2})),
            ("cgs", dict(group_a={0, 1}, group_b={2, 3})),
            ("deletion", dict(target=0)),
        ):
            expected = brute_force_metric(name, weights, bias, pixels, values, params)
            got = getattr(mx, name)(model, img, sal, **params)
            worst = max(worst, abs(got.score - expected))
    ok = worst <= 1e-9
    criterion("metric-oracle", ok, f"2 fixtures x 5 metrics, worst |delta| {worst:.2e}")


def test_pgs_full_class_set_is_zero_and_cgs_swap_negates(trained, criterion):
    side = trained.tax.side
    full = frozenset(range(trained.tax.num_classes))
    ga, gb = frozenset(range(0, 5)), frozenset(range(10, 15))
    worst = 0.0
    swaps_exact = True
    for i in range(100):
        rng = np.random.default_rng([13, i])
        img = ImageTensor(rng.random((side, side, 3)))
        sal = SaliencyMap(rng.normal(size=(side, side)))
        worst = max(worst, abs(pgs(trained.model, img, sal, full).score))
        fwd = cgs(trained.model, img, sal, ga, gb).score
        rev = cgs(trained.model, img, sal, gb, ga).score
        swaps_exact = swaps_exact and (fwd == -rev)
    ok = worst <= 1e-9 and swaps_exact
    criterion(
        "normalization-identity",
        ok,
        f"100 pairs, max |full-set PGS| {worst:.2e}, swap antisymmetry "
        f"{'exact' if swaps_exact else 'BROKEN'}",
    )


def test_informed_explainers_beat_random_on_trained_model(trained, criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        seed=0,
        output=str(tmp_path / "run"),
        eval_images=200,
        model=f"checkpoint:{trained.checkpoint}",
        overlays=2,
    )
    outcome = run_experiment(cfg)
    assert outcome.status == "ok", outcome
    assert outcome.processed >= 200

    rows = {}
    with open(tmp_path / "run" / "significance.csv", newline="") as fh:
        import csv

        for row in csv.DictReader(fh):
            key = (row["metric"], row["explainer-a"], row["explainer-b"])
            rows[key] = (float(row["mean-a"]), float(row["mean-b"]), float(row["p"]))

    bad = []
    max_p = 0.0
    for metric in GAP_METRICS:
        for informed in INFORMED:
            mean_i, mean_r, p = rows[(metric, informed, "random")]
            max_p = max(max_p, p)
            if not (mean_i > mean_r and p < 0.05):
                bad.append(f"{metric}/{informed} p={p:.2g} d={mean_i - mean_r:+.2f}")
    mean_g, mean_r, p = rows[("deletion", "gradient", "random")]
    max_p = max(max_p, p)
    if not (mean_g < mean_r and p < 0.05):
        bad.append(f"deletion/gradient p={p:.2g} d={mean_g - mean_r:+.2f}")

    seconds = time.perf_counter() - t0 + trained.train_seconds
    ok = trained.val >= 0.90 and not bad and seconds < 900.0
    detail = (
        f"val acc {trained.val:.3f}, {17 - len(bad)}/17 ordered, "
        f"max p {max_p:.1e}, train+eval {seconds:.0f}s"
    )
    if bad:
        detail += " | " + "; ".join(bad)
    criterion("separation", ok, detail)


def test_group_matched_saliency_outscores_mismatched(trained, cases, criterion):
    n = trained.tax.num_classes
    matched, mismatched = [], []
    for case in cases:
        sel = case.sel
        w_match = query_to_objective(PointwiseGroup(sel.group_a), n)
        w_mis = query_to_objective(PointwiseGroup(sel.group_b), n)
        m_match = explain_gradient(trained.model, case.image, w_match)
        m_mis = explain_gradient(trained.model, case.image, w_mis)
        matched.append(pgs(trained.model, case.image, m_match, sel.group_a).score)
        mismatched.append(pgs(trained.model, case.image, m_mis, sel.group_a).score)
    t = paired_t_test(matched, mismatched)
    gap = float(np.mean(matched) - np.mean(mismatched))
    ok = gap > 0 and t.p < 0.05
    criterion(
        "objective-match",
        ok,
        f"200 images, matched-vs-mismatched PGS gap {gap:+.2f}, p {t.p:.1e}",
    )


def test_informed_minus_random_sign_is_fill_invariant(trained, cases, criterion):
    fills = [MaskFill.parse(s) for s in ("black", "mean", "noise:9", "blur:2:4")]
    sums = {f.spec(): {m: [0.0, 0.0] for m in GAP_METRICS + ("deletion",)} for f in fills}

    for idx, case in enumerate(cases):
        queries = queries_for(case.sel)
        grads = {
            variant: explain_gradient(
                trained.model, case.image, query_to_objective(q, trained.tax.num_classes)
            )
            for variant, q in queries.items()
        }
        noise = explain_random(case.image.height, case.image.width, [0, 7, idx])
        for fill in fills:
            for metric, variant in METRIC_QUERY.items():
                cell = sums[fill.spec()][metric]
                cell[0] += compute_metric(
                    metric, trained.model, case.image, grads[variant], case.sel, None, fill
                ).score
                cell[1] += compute_metric(
                    metric, trained.model, case.image, noise, case.sel, None, fill
                ).score

    bad = []
    for metric in GAP_METRICS + ("deletion",):
        signs = {
            spec: np.sign(cell[metric][0] - cell[metric][1])
            for spec, cell in sums.items()
        }
        if 0.0 in signs.values() or len(set(signs.values())) != 1:
            bad.append(f"{metric}: {signs}")
    ok = not bad
    detail = "200 images x 4 fills, all 5 metric signs consistent"
    if bad:
        detail = "; ".join(bad)
    criterion("fill-robustness", ok, detail)


def test_group_construction_reproduces_hand_traced_table(criterion):
    expected = [
        ("car", frozenset(range(0, 5))),
        ("truck+car", frozenset(range(0, 7))),
        ("dog+cat", frozenset(range(7, 12))),
        ("pet", frozenset(range(7, 14))),
        ("instrument", frozenset(range(14, 20))),
    ]
    expected_primary = {
        **{i: 0 for i in range(0, 5)},
        **{i: 1 for i in (5, 6)},
        **{i: 2 for i in range(7, 12)},
        **{i: 3 for i in (12, 13)},
        **{i: 4 for i in range(14, 20)},
    }
    gt = build_groups(read_hierarchy(DATA / "hierarchy.tsv"))
    got = [(g.label, g.members) for g in gt.groups]
    ok = got == expected and gt.primary == expected_primary and not any(
        g.residual for g in gt.groups
    )
    criterion(
        "group-construction",
        ok,
        f"{len(gt.groups)} groups incl. merged labels "
        + ", ".join(repr(l) for l, _ in got if "+" in l),
    )


def test_eval_runs_are_byte_identical(trained, criterion, tmp_path):
    def run(tag):
        cfg = ExperimentConfig(
            seed=3,
            output=str(tmp_path / tag),
            eval_images=20,
            model=f"checkpoint:{trained.checkpoint}",
            explainers=("gradient", "random"),
            overlays=2,
        )
        outcome = run_experiment(cfg)
        assert outcome.status == "ok"
        return tmp_path / tag

    a, b = run("first"), run("second")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    same_names = files_a == files_b
    diffs = [
        str(rel)
        for rel in files_a
        if same_names and (a / rel).read_bytes() != (b / rel).read_bytes()
    ]
    ok = same_names and not diffs
    detail = f"{len(files_a)} files compared byte for byte"
    if not same_names:
        detail = "file lists differ"
    elif diffs:
        detail = "differing files: " + ", ".join(diffs)
    criterion("determinism", ok, detail)


def _bridge_command(checkpoint):
    return [sys.executable, "-m", "rfxg_bridge.server", str(checkpoint)]


def test_bridge_forward_and_grad_match_local_model(trained, cases, criterion):
    n = trained.tax.num_classes
    worst_p, worst_g = 0.0, 0.0
    scorer = RemoteScorer(_bridge_command(trained.checkpoint))
    try:
        assert scorer.num_classes == n
        assert scorer.supports_gradients
        for i in range(20):
            pixels = cases[i].image.data
            # the wire carries f32, so compare against the model run on the
            # same rounded pixels
            wire = pixels.astype("<f4").astype(np.float64)
            remote_p = scorer.probs_single(pixels)
            local_p = trained.model.probs_batch(wire[None])[0]
            worst_p = max(worst_p, float(np.max(np.abs(remote_p - local_p))))

            w = np.zeros(n)
            w[cases[i].sel.class_a] = 1.0
            on_logits = i % 4 != 0
            remote_g = scorer.grad_single(pixels, w, on_logits=on_logits)
            local_g = trained.model.input_gradients(wire[None], w, on_logits=on_logits)[0]
            worst_g = max(worst_g, float(np.max(np.abs(remote_g - local_g))))
    finally:
        scorer.close()
    ok = worst_p <= 1e-5 and worst_g <= 1e-4
    criterion(
        "bridge-parity",
        ok,
        f"20 fixtures, max |p| gap {worst_p:.1e}, max grad gap {worst_g:.1e}, "
        f"all probability replies validated",
    )


def _hostile_frames(rng, count, image_b64):
    printable = np.frombuffer(b"azAZ09{}[]\"':,.!@#$%", dtype=np.uint8)
    frames = []
    for i in range(count):
        kind = i % 10
        if kind == 0:
            raw = rng.integers(0, 256, size=int(rng.integers(1, 200))).astype(np.uint8)
            frames.append(bytes(raw).replace(b"\n", b".").replace(b"\r", b"."))
        elif kind == 1:
            raw = rng.choice(printable, size=int(rng.integers(1, 120)))
            frames.append(bytes(raw.tolist()))
        elif kind == 2:
            frames.append((b"42", b"null", b'"x"', b"[1,2,", b"{")[int(rng.integers(0, 5))])
        elif kind == 3:
            frames.append(json.dumps({"op": "nope"}).encode())
        elif kind == 4:
            frames.append(json.dumps({"op": int(rng.integers(0, 9))}).encode())
        elif kind == 5:
            frames.append(json.dumps({"op": "forward"}).encode())
        elif kind == 6:
            frames.append(json.dumps({
                "op": "forward", "image": "!!!not-base64!!!",
                "height": 32, "width": 32, "channels": 3,
            }).encode())
        elif kind == 7:
            frames.append(json.dumps({
                "op": "forward", "image": image_b64[: max(8, int(rng.integers(8, 64)))],
                "height": 32, "width": 32, "channels": 3,
            }).encode())
        elif kind == 8:
            frames.append(json.dumps({
                "op": "grad", "image": image_b64, "weights": "heavy",
                "height": 32, "width": 32, "channels": 3, "on_logits": True,
            }).encode())
        else:
            frames.append(json.dumps({
                "op": "grad", "image": image_b64,
                "weights": [1.0] * int(rng.integers(1, 8)),
                "height": 32, "width": 32, "channels": 3, "on_logits": True,
            }).encode())
    return frames


def test_bridge_survives_malformed_frame_flood(trained, criterion):
    image_b64 = base64.b64encode(
        np.zeros(32 * 32 * 3, dtype="<f4").tobytes()
    ).decode()
    proc = subprocess.Popen(
        _bridge_command(trained.checkpoint),
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
    )
    watchdog = threading.Timer(180.0, proc.kill)
    watchdog.start()
    replies = 0
    try:
        frames = _hostile_frames(np.random.default_rng(2025), 1000, image_b64)
        for frame in frames:
            proc.stdin.write(frame + b"\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
            assert line, f"bridge stopped replying after {replies} frames"
            json.loads(line)
            replies += 1

        assert proc.poll() is None, "bridge process died during the flood"

        # still fully functional afterwards
        proc.stdin.write(json.dumps({"op": "hello"}).encode() + b"\n")
        proc.stdin.flush()
        hello = json.loads(proc.stdout.readline())
        assert hello["classes"] == trained.tax.num_classes
        proc.stdin.write(json.dumps({
            "op": "forward", "image": image_b64,
            "height": 32, "width": 32, "channels": 3,
        }).encode() + b"\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        probs = np.frombuffer(base64.b64decode(reply["probs"]), dtype="<f4")
        assert len(probs) == trained.tax.num_classes
        assert abs(float(probs.sum()) - 1.0) <= 1e-4

        proc.stdin.write(b'{"op": "bye"}\n')
        proc.stdin.flush()
        proc.stdin.close()
        code = proc.wait(timeout=30)
    finally:
        watchdog.cancel()
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    ok = replies == 1000 and code == 0
    criterion(
        "bridge-fuzz",
        ok,
        f"{replies}/1000 hostile frames answered, clean exit {code}",
    )
