"""End-to-end acceptance checks. Each test prints one PASS/FAIL line, collected in the terminal summary."""
import csv
import io
import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ACCEPTANCE_LINES
from rcvmap.cli import main
from rcvmap.evalkit import ScoredElement, chamfer_distance, evaluate, gt_as_predictions, mean_ap, table_csv
from rcvmap.map_model import MapElement
from rcvmap.matching import Targets, _aligned_gt, assign_instances, best_permutation, instance_match_cost, softmax_np, total_loss
from rcvmap.netcore import FeatureMap, ModelConfig, build_model, images_to_tensor
from rcvmap.synthworld import SceneParams, generate_scene, make_sample

OVERFIT_STEPS = 1000
ABLATION_STEPS = 100


def verdict(cid: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {name}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------- 1: mAP arithmetic


def test_01_mean_ap_arithmetic():
    a = mean_ap({"ped_crossing": 58.7, "divider": 64.8, "boundary": 65.5})
    b = mean_ap({"ped_crossing": 39.1, "divider": 56.6, "boundary": 51.3})
    verdict(1, "mAP is the class mean", abs(a - 63.0) <= 0.05 and abs(b - 49.0) <= 0.05, f"{a:.3f}, {b:.3f}")


# ------------------------------------------------------- 2: assignment optimality


def brute_force_assignment(cost):
    m, n = cost.shape
    return min(sum(cost[r, c] for c, r in enumerate(rows)) for rows in itertools.permutations(range(m), n))


def test_02_hungarian_matches_brute_force():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 7))
        n_pts = int(rng.integers(2, 7))
        closed = rng.random(n) < 0.4
        labels = np.where(closed, 0, rng.integers(1, 3, n))
        tg = Targets(labels, rng.random((n, n_pts, 2)), closed)
        logits, pts = rng.normal(size=(m, 4)), rng.random((m, n_pts, 2))
        res = assign_instances(logits, pts, tg)
        probs = softmax_np(logits)
        cost = np.array(
            [[instance_match_cost(probs[j], pts[j], (labels[i], tg.points[i], closed[i])) for i in range(n)] for j in range(m)]
        )
        worst = max(worst, abs(res.total_cost - brute_force_assignment(cost)))
    elapsed = time.perf_counter() - t0
    verdict(2, "Hungarian equals brute force", worst <= 1e-9 and elapsed < 10, f"max gap {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------- 3: permutation search


def exhaustive_orderings(n, closed):
    """Every admissible vertex ordering, built directly from index arithmetic."""
    if not closed:
        return [list(range(n)), list(range(n - 1, -1, -1))]
    fwd = [[(s + i) % n for i in range(n)] for s in range(n)]
    return fwd + [[(s - i) % n for i in range(n)] for s in range(n)]


def test_03_best_permutation_exhaustive():
    rng = np.random.default_rng(3)
    bad = 0
    for closed in (False, True):
        for _ in range(100):
            n = int(rng.integers(2, 9))
            gt, pred = rng.random((n, 2)), rng.random((n, 2))
            brute = min(sum(abs(pred[i] - gt[o[i]]).sum() for i in range(n)) for o in exhaustive_orderings(n, closed))
            _, cost = best_permutation(pred, gt, closed)
            bad += abs(cost - brute) > 1e-12
    verdict(3, "best permutation equals exhaustive search", bad == 0, f"{bad} mismatches of 200")


# ------------------------------------------------------------ 4: gradient check


class CellRecorder:
    """Wraps grid_sample to record which bilinear cell each sample falls in."""

    def __init__(self):
        self.cells = []
        self._orig = F.grid_sample

    def __call__(self, inp, grid, *args, **kwargs):
        h, w = inp.shape[-2:]
        g = grid.detach()
        u = ((g[..., 0] + 1) * w - 1) / 2
        v = ((g[..., 1] + 1) * h - 1) / 2
        self.cells.append(torch.cat([torch.floor(u).flatten(), torch.floor(v).flatten()]))
        return self._orig(inp, grid, *args, **kwargs)

    def take(self):
        out = torch.cat(self.cells)
        self.cells = []
        return out


def piece_signature(rep, layers, targets):
    """Matching plus the sign of every matched point residual (the L1 kinks)."""
    sig = []
    for layer_matches, (_, points) in zip(rep.matches, layers):
        for s, (m, tg) in enumerate(zip(layer_matches, targets)):
            pred = points[s, torch.as_tensor(m.pred_idx, dtype=torch.long)].detach()
            signs = torch.sign(pred - _aligned_gt(tg, m, pred.dtype))
            sig.append((m.pred_idx.tolist(), m.perm_idx.tolist(), signs.flatten().tolist()))
    return sig


def test_04_gradient_check(monkeypatch):
    t0 = time.perf_counter()
    rec = CellRecorder()
    monkeypatch.setattr(F, "grid_sample", rec)
    params = replace(SceneParams(), image_size=(64, 64), focal_length=32.0)
    sample = make_sample(0, params)
    x = images_to_tensor(sample.images, torch.float64).unsqueeze(0)
    targets = [Targets.from_map(sample.gt)]
    model = build_model(ModelConfig(preset="nano", image_size=(64, 64), bev_size=20, num_queries=30), seed=0).double()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # move the STN off its identity init, where every sample sits exactly on a bilinear kink
        for stn in model.stns:
            stn.fc_theta.weight.normal_(0, 1e-2, generator=gen)
            stn.fc_theta.bias.add_(0.02 * torch.randn(6, generator=gen, dtype=torch.float64))
    model.eval()

    def loss():
        layers = model(x).layers
        rep = total_loss(layers, targets)
        return rep, piece_signature(rep, layers, targets)

    base, base_sig = loss()
    base.loss.backward()
    base_cells = rec.take()

    named = list(model.named_parameters())
    rng = np.random.default_rng(0)
    h, checked, redrawn, failures, worst = 1e-3, 0, 0, [], 0.0
    while checked < 50:
        name, p = named[rng.integers(len(named))]
        i = int(rng.integers(p.numel()))
        analytic = p.grad.reshape(-1)[i].item()
        vals, smooth = [], True
        for sign in (1.0, -1.0):
            with torch.no_grad():
                p.view(-1)[i] += sign * h
                r, sig = loss()
                p.view(-1)[i] -= sign * h
            # finite differences are only meaningful inside one smooth piece
            smooth &= sig == base_sig and torch.equal(rec.take(), base_cells)
            vals.append(r.total)
        if not smooth:
            redrawn += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        rel = abs(analytic - numeric) / scale if scale > 0 else 0.0
        worst = max(worst, rel)
        if rel > 1e-2:
            failures.append((name, i, analytic, numeric))
        checked += 1
    elapsed = time.perf_counter() - t0
    verdict(
        4,
        "analytic gradients match central differences",
        not failures and elapsed < 120,
        f"worst rel err {worst:.1e}, {redrawn} redrawn, {elapsed:.0f}s" + (f", failing {failures}" if failures else ""),
    )


# ------------------------------------------------------------ 5: STN identity


def test_05_stn_identity_at_init():
    cfg = ModelConfig(preset="nano")
    model = build_model(cfg, seed=5)
    rng = torch.Generator().manual_seed(5)
    worst = 0.0
    for k in range(20):
        x = torch.randn(2, cfg.neck_out_channels, 32, 32, generator=rng)
        with torch.no_grad():
            y = model.stn_forward(FeatureMap(x, 4), view=k % 4).data
        worst = max(worst, (y - x).abs().max().item())
    verdict(5, "STN is the identity at init", worst <= 1e-6, f"max abs diff {worst:.1e}")


# ------------------------------------------------------------- 6: metric checks


def chamfer_oracle(a, b):
    da = sum(min(math.dist(p, q) for q in b) for p in a) / len(a)
    db = sum(min(math.dist(p, q) for p in a) for q in b) / len(b)
    return 0.5 * (da + db)


def noisy_predictions(gt, rng):
    out = []
    sigma = rng.uniform(0.05, 2.0)
    for el in gt.elements:
        if rng.random() < 0.1:
            continue
        pts = np.clip(el.points + rng.normal(0, sigma, el.points.shape), -30, 30)
        out.append(ScoredElement(MapElement(el.class_id, pts, el.is_closed), float(rng.random())))
    for _ in range(int(rng.integers(0, 5))):
        el = gt.elements[int(rng.integers(len(gt)))]
        pts = np.clip(el.points + rng.uniform(-6, 6, 2), -30, 30)
        out.append(ScoredElement(MapElement(el.class_id, pts, el.is_closed), float(rng.random())))
    return out


def test_06_metric_properties():
    rng = np.random.default_rng(6)
    chamfer_gap = 0.0
    for _ in range(100):
        a = rng.uniform(-30, 30, (int(rng.integers(1, 21)), 2))
        b = rng.uniform(-30, 30, (int(rng.integers(1, 21)), 2))
        chamfer_gap = max(chamfer_gap, abs(chamfer_distance(a, b) - chamfer_oracle(a, b)))

    gts = [generate_scene(s)[0] for s in range(3)]
    violations = 0
    for _ in range(50):
        rep = evaluate([noisy_predictions(g, rng) for g in gts], gts)
        for taus in rep.per_threshold.values():
            violations += not (taus[0.5] <= taus[1.0] <= taus[1.5])
    perfect = evaluate([gt_as_predictions(g) for g in gts], gts).mAP
    ok = chamfer_gap <= 1e-9 and violations == 0 and perfect == 1.0
    verdict(6, "Chamfer oracle, AP threshold order, perfect mAP", ok,
            f"chamfer gap {chamfer_gap:.1e}, {violations} order violations, GT mAP {perfect!r}")


# ------------------------------------------------- 7-9: training end to end


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit") / "data"
    assert main(["gen-data", "--seed", "0", "--n-scenes", "8", "--split-ratio", "1.0", "--out", str(out)]) == 0
    return out


def overfit_run(data, root, monkeypatch):
    monkeypatch.setenv("RCVMAP_RUNS", str(root))
    t0 = time.perf_counter()
    assert main(["train", "--dataset", str(data), "--split", "train", "--seed", "0", "--preset", "nano",
                 "--steps", str(OVERFIT_STEPS), "--checkpoint-every", "0", "--run-id", "overfit"]) == 0
    ckpt = root / "overfit" / "checkpoints" / "last.pt"
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data), "--split", "train"]) == 0
    elapsed = time.perf_counter() - t0
    log = [json.loads(line) for line in (root / "overfit" / "train_log.jsonl").read_text().splitlines()]
    report = (root / "overfit" / "reports" / "eval_train.json").read_bytes()
    return log, report, elapsed


@pytest.fixture(scope="module")
def overfit_first(overfit_data, tmp_path_factory):
    mp = pytest.MonkeyPatch()
    try:
        return overfit_run(overfit_data, tmp_path_factory.mktemp("runs_a"), mp)
    finally:
        mp.undo()


@pytest.mark.slow
def test_07_overfit_eight_scenes(overfit_first):
    _, report, elapsed = overfit_first
    m = json.loads(report)["mAP"]
    verdict(7, "nano overfits 8 scenes", m >= 0.90 and elapsed <= 20 * 60,
            f"mAP {m:.3f} after {OVERFIT_STEPS} steps, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_08_ablations_complete(tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert main(["gen-data", "--seed", "100", "--n-scenes", "8", "--out", str(data)]) == 0
    monkeypatch.setenv("RCVMAP_RUNS", str(tmp_path / "runs"))
    variants = {
        "panet_nano_4view": [],
        "fpn_nano_4view": ["--neck", "fpn"],
        "panet_nano_1view": ["--single-view"],
        "panet_tiny_4view": ["--preset", "tiny"],
    }
    rows = []
    for run_id, extra in variants.items():
        assert main(["train", "--dataset", str(data), "--steps", str(ABLATION_STEPS), "--checkpoint-every", "0",
                     "--run-id", run_id, *extra]) == 0
        ckpt = tmp_path / "runs" / run_id / "checkpoints" / "last.pt"
        assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data), "--split", "val"]) == 0
        rep = json.loads((tmp_path / "runs" / run_id / "reports" / "eval_val.json").read_text())
        rows.append((run_id, rep["table_row"]))
    table = list(csv.DictReader(io.StringIO(table_csv(rows))))
    print(table_csv(rows))
    ok = len(table) == 4 and all(0.0 <= float(r[k]) <= 1.0 for r in table for k in ("AP_ped", "AP_divider", "AP_boundary", "mAP"))
    verdict(8, "ablation variants emit comparable rows", ok, ", ".join(f"{r['run']} {r['mAP']}" for r in table))


@pytest.mark.slow
def test_09_determinism(overfit_data, overfit_first, tmp_path, monkeypatch):
    log_a, report_a, _ = overfit_first
    log_b, report_b, _ = overfit_run(overfit_data, tmp_path / "runs_b", monkeypatch)
    same_losses = log_a[:11] == log_b[:11]
    verdict(9, "repeat run is identical", same_losses and report_a == report_b,
            f"steps 0-10 equal: {same_losses}, reports equal: {report_a == report_b}")
