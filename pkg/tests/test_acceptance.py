"""Acceptance criteria 1-10, one test each.

Every test records a ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary and echoed to stdout (visible with ``-s``).
"""
import contextlib
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

import oracles
from conftest import ACCEPTANCE_LINES
from iagaze.checkpoint import load_checkpoint, save_checkpoint
from iagaze.data import Fixation, FixationSet, HOISample, fixations_to_heatmap, make_zeroshot_split, resize_map
from iagaze.encoders import MockBackend
from iagaze.errors import LeakageError
from iagaze.hoi import AlignmentConfig, make_toy_data, pseudo_label, train_toy_hoi
from iagaze.metrics import REFERENCE_FULL_SCALE, auc, cc, kldiv, sim
from iagaze.model import IAConfig, bce, build_model, collate, encode_sample, fourier_embed, ia_forward
from iagaze.synthetic import make_corpus
from iagaze.training import VARIANTS, TrainConfig, Trainer, ablate, prepare


@contextlib.contextmanager
def criterion(n, title):
    detail = {}
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield detail
        status = detail.pop("status", "PASS")
    finally:
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {n:>2}: {status}  {title}  [{time.perf_counter() - t0:.1f}s{', ' + extra if extra else ''}]"
        ACCEPTANCE_LINES.append(line)
        print(line)


# 1 -------------------------------------------------------------------------

def test_criterion_01_metric_oracles():
    with criterion(1, "metrics match brute-force oracles on 50 random 16x16 fixtures (tol 1e-9, < 10 s)") as d:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(50):
            pred = rng.random((16, 16))
            gt = rng.random((16, 16)) ** 3
            n_fix = int(rng.integers(1, 12))
            cells = {(int(r), int(c)) for r, c in rng.integers(0, 16, size=(n_fix, 2))}
            fix = FixationSet("f", [Fixation(float(c), float(r), "o") for r, c in cells])
            pairs = [(cc(pred, gt), oracles.cc(pred, gt)), (kldiv(pred, gt), oracles.kldiv(pred, gt)),
                     (sim(pred, gt), oracles.sim(pred, gt)), (auc(pred, fix), oracles.auc_pairwise(pred, cells))]
            for got, ref in pairs:
                worst = max(worst, abs(got - ref))
        elapsed = time.perf_counter() - t0
        d["max_abs_err"] = f"{worst:.2e}"
        assert worst <= 1e-9
        assert elapsed < 10


# 2 -------------------------------------------------------------------------

def test_criterion_02_metric_anchors():
    with criterion(2, "trivial metric anchors") as d:
        m = np.random.default_rng(7).random((8, 8))
        assert abs(cc(m, m) - 1) <= 1e-12
        assert kldiv(m, m) <= 1e-9
        assert abs(sim(m, m) - 1) <= 1e-9
        assert auc(np.full((8, 8), 0.42), FixationSet("c", [Fixation(3, 4, "o")])) == 0.5
        delta = np.array([[1.0, 0.0], [0.0, 0.0]])
        kl = kldiv(np.ones((2, 2)), delta)
        d["kl_uniform_vs_delta"] = f"{kl:.7f}"
        assert abs(kl - math.log(4)) <= 1e-6


# 3 -------------------------------------------------------------------------

def test_criterion_03_gradient_check():
    with criterion(3, "analytic vs central-difference gradients, D=8 M=4 float64 (rel err < 1e-4, < 60 s)") as d:
        t0 = time.perf_counter()
        cfg = IAConfig(text_dim=6, visual_dim=5, model_width=8, n_heads=2, mlp_hidden=8, fourier_bands=1,
                       patch_size=16, image_size=32)
        assert cfg.grid[0] * cfg.grid[1] == 4
        model = build_model(cfg, seed=0, dtype=torch.float64, zero_init=False)
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            model.icb.gate.uniform_(-1, 1, generator=g)  # exercise the cross-attention branch too
        model.train()
        text = torch.randn(2, 3, 6, generator=g, dtype=torch.float64)
        boxes = torch.rand(2, 2, 4, generator=g, dtype=torch.float64)
        tokens = torch.randn(2, 4, 5, generator=g, dtype=torch.float64)
        sizes = [(7, 9), (5, 6)]
        targets = [torch.rand(s, generator=g, dtype=torch.float64) for s in sizes]

        def loss():
            preds = model.predict_maps(text, boxes, tokens, sizes)
            return torch.stack([bce(p, t) for p, t in zip(preds, targets)]).mean()

        model.zero_grad()
        loss().backward()
        h = 1e-6
        worst, worst_name = 0.0, None
        with torch.no_grad():
            for name, p in model.named_parameters():
                analytic = p.grad.clone()
                numeric = torch.zeros_like(p)
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = loss().item()
                    flat[i] = orig - h
                    down = loss().item()
                    flat[i] = orig
                    numeric.view(-1)[i] = (up - down) / (2 * h)
                denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
                rel = (analytic - numeric).norm().item() / denom
                if rel > worst:
                    worst, worst_name = rel, name
        d["worst_rel_err"] = f"{worst:.2e}"
        d["worst_tensor"] = worst_name
        d["n_params"] = sum(p.numel() for p in model.parameters())
        assert worst < 1e-4
        assert time.perf_counter() - t0 < 60


# 4 -------------------------------------------------------------------------

def test_criterion_04_identity_at_init():
    with criterion(4, "zero-init output bitwise independent of knowledge prototypes") as d:
        records, images = make_corpus(3, seed=11)
        backend = MockBackend(seed=0)
        model = build_model(IAConfig(), seed=5)
        model.eval()
        g = torch.Generator().manual_seed(1)
        for sample, _ in records:
            ref = ia_forward(sample, images[sample.sample_id], backend, model)
            enc = encode_sample(backend, sample, images[sample.sample_id])
            text, boxes, tokens, sizes = collate([enc])
            D = model.cfg.model_width
            fake = {k: torch.randn(1, D, generator=g) * 10 for k in ("human", "object", "interaction")}
            with torch.no_grad():
                got = model.predict_maps(text, boxes, tokens, sizes, prototypes=fake)[0].double().numpy()
            assert np.array_equal(ref, got)
        d["samples"] = len(records)


# 5 -------------------------------------------------------------------------

# Desk fixture for the overfit run. An 8x8 token grid and a 5-pixel kernel give
# targets the decoder can represent; lr is raised and decay disabled so 200
# epochs suffice.
OVERFIT_MODEL = IAConfig(patch_size=8, image_size=64)
OVERFIT_TRAIN = TrainConfig(lr=3e-3, epochs=200, batch_size=4, lr_decay_every=1000, seed=0, dtype="float64")
OVERFIT_SIGMA = 5.0


def test_criterion_05_overfit():
    with criterion(5, "overfit 4 samples, 200 epochs: BCE < 0.25 x initial, cc > 0.9 each (< 5 min)") as d:
        t0 = time.perf_counter()
        records, images = make_corpus(4, seed=0)
        backend = MockBackend(seed=0, patch_size=8, image_size=64)
        items = prepare(records, backend, images=images, sigma=OVERFIT_SIGMA)
        model = build_model(OVERFIT_MODEL, seed=0, dtype=torch.float64)
        trainer = Trainer(items, model, OVERFIT_TRAIN)
        initial = trainer.eval_loss()
        trainer.fit()
        final = trainer.eval_loss()
        ccs = [cc(ia_forward(s, images[s.sample_id], backend, model), it.target)
               for (s, _), it in zip(records, items)]
        d["loss_ratio"] = f"{final / initial:.3f}"
        d["min_cc"] = f"{min(ccs):.3f}"
        assert final < 0.25 * initial
        assert all(c > 0.9 for c in ccs)
        assert time.perf_counter() - t0 < 300


# 6 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def leak_checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("leak") / "ia.iack"
    save_checkpoint(path, build_model(IAConfig(model_width=8, n_heads=2, mlp_hidden=8)), {"train_ids": []})
    return path


_ACTIONS = ["ride", "eat", "hold", "kick", "throw", "cut"]
_OBJECTS = ["bicycle", "apple", "cup", "ball", "kite"]
_zero_shot_stats = {"corpora": 0, "leak_checks": 0}


@settings(max_examples=200, deadline=None, database=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(cats=st.lists(st.tuples(st.sampled_from(_ACTIONS), st.sampled_from(_OBJECTS)), min_size=2, max_size=40),
       seed=st.integers(0, 2**32 - 1), key=st.sampled_from(["interaction_pair", "action_only"]),
       frac=st.floats(0.05, 0.95), pick=st.integers(0, 10**6))
def _zero_shot_property(leak_checkpoint, tmp_path_factory, cats, seed, key, frac, pick):
    samples = [HOISample(f"z{i}", "x.png", 32, 32, (0, 0, 10, 10), (10, 10, 30, 30), o, a)
               for i, (a, o) in enumerate(cats)]
    assume(len({s.category(key) for s in samples}) >= 2)
    split = make_zeroshot_split(samples, key, seed=seed, test_fraction=frac)
    by_id = {s.sample_id: s for s in samples}
    train_c = {by_id[i].category(key) for i in split.train_ids}
    test_c = {by_id[i].category(key) for i in split.test_ids}
    assert train_c and test_c and not (train_c & test_c)
    assert sorted(split.train_ids + split.test_ids) == sorted(by_id)
    _zero_shot_stats["corpora"] += 1

    # a checkpoint trained on the train side must refuse any overlapping sample
    ck = tmp_path_factory.getbasetemp() / f"leak-{seed % 7}.iack"
    model, _, _ = load_checkpoint(leak_checkpoint)
    save_checkpoint(ck, model, {"train_ids": split.train_ids})
    leaked = split.train_ids[pick % len(split.train_ids)]
    chosen = [(by_id[leaked], FixationSet(leaked))] + [(by_id[i], FixationSet(i)) for i in split.test_ids[:2]]
    with pytest.raises(LeakageError):
        pseudo_label(ck, chosen, MockBackend(), images={})
    _zero_shot_stats["leak_checks"] += 1


def test_criterion_06_zero_shot_discipline(leak_checkpoint, tmp_path_factory):
    with criterion(6, "200 random corpora: disjoint category splits, leakage always rejected") as d:
        _zero_shot_property(leak_checkpoint, tmp_path_factory)
        d.update(_zero_shot_stats)
        assert _zero_shot_stats["leak_checks"] == _zero_shot_stats["corpora"] == 200


# 7 -------------------------------------------------------------------------

def test_criterion_07_ablation_harness():
    with criterion(7, "five ablation variants run end to end; w/o ICB has no cross-attention") as d:
        records, images = make_corpus(16, seed=2)
        split = make_zeroshot_split([s for s, _ in records], seed=0, test_fraction=0.25)
        train_r = [r for r in records if r[0].sample_id in set(split.train_ids)]
        test_r = [r for r in records if r[0].sample_id in set(split.test_ids)]
        backend = MockBackend(seed=0)
        train_items = prepare(train_r, backend, images=images, sigma=4.0)
        test_items = prepare(test_r, backend, images=images, sigma=4.0)
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=0)
        rows = ablate(train_items, test_r, test_items, IAConfig(), cfg, variants=list(VARIANTS), sigma=4.0)
        assert [r["variant"] for r in rows] == list(VARIANTS)
        for r in rows:
            assert all(np.isfinite(r[k]) for k in ("cc", "kldiv", "sim", "auc", "final_loss"))
        census = {r["variant"]: r["census"] for r in rows}
        assert not any("cross_attn" in name for name in census["w/o ICB"])
        assert any("cross_attn" in name for name in census["full"])
        d["n_params"] = {r["variant"]: r["n_params"] for r in rows}


# 8 -------------------------------------------------------------------------

# Toy host fixture: 400 train / 300 test planted-cue images, 30 epochs at lr 1e-3.
# lambda2 = 2 keeps the alignment term on the scale of the toy cross-entropy.
TOY_SEEDS = (0, 1, 2)
TOY_ALIGN = AlignmentConfig(lambda1=1.0, lambda2=2.0)


def test_criterion_08_alignment_wiring():
    with criterion(8, "lambda2=0 == plain bitwise; aligned run raises in-cue attention; acc >= plain in >= 2/3 seeds") as d:
        train, test = make_toy_data(400, seed=100), make_toy_data(300, seed=200)
        wins = 0
        summary = []
        for seed in TOY_SEEDS:
            plain = train_toy_hoi(train, test, None, seed=seed)
            if seed == TOY_SEEDS[0]:
                zero = train_toy_hoi(train, test, replace(TOY_ALIGN, lambda2=0.0), seed=seed)
                assert np.array_equal(zero.attention_maps, plain.attention_maps)
                assert zero.accuracy == plain.accuracy and zero.loss_log == plain.loss_log
            aligned = train_toy_hoi(train, test, TOY_ALIGN, seed=seed)
            assert aligned.in_mask_fraction > plain.in_mask_fraction
            wins += aligned.accuracy >= plain.accuracy
            summary.append(f"s{seed}:{plain.accuracy:.3f}->{aligned.accuracy:.3f}/"
                           f"mask {plain.in_mask_fraction:.3f}->{aligned.in_mask_fraction:.3f}")
        d["runs"] = " ".join(summary)
        assert wins >= 2


# 9 -------------------------------------------------------------------------

def test_criterion_09_fourier_and_pooling_anchors():
    with criterion(9, "Fourier zeros -> alternating 0/1 (len 64); adaptive max 4x4 -> [[6,8],[14,16]]"):
        f = fourier_embed(np.zeros(4), 8)
        assert f.shape == (64,) and f.tolist() == [0.0, 1.0] * 32
        grid = np.arange(1, 17, dtype=float).reshape(4, 4)
        assert resize_map(grid, 2, 2, "adaptive_max").tolist() == [[6, 8], [14, 16]]


# 10 ------------------------------------------------------------------------

def test_criterion_10_full_scale_is_report_only(tmp_path, capsys):
    """Full-scale numbers need the real dataset, pretrained encoders and host detectors.

    The check here is that the full-scale mode carries the published reference
    values as information and applies no thresholds.
    """
    with criterion(10, "full-scale benchmark values") as d:
        from iagaze.cli import dispatch
        from iagaze.data import load_dataset, write_heatmap
        from iagaze.synthetic import write_corpus

        manifest = write_corpus(tmp_path / "c", 6, seed=1)
        (tmp_path / "p").mkdir()
        for s, f in load_dataset(manifest):
            write_heatmap(fixations_to_heatmap(f, s.width, s.height), tmp_path / "p" / f"{s.sample_id}.ighm")
        code = dispatch(["evaluate", "--manifest", str(manifest), "--pred", str(tmp_path / "p"),
                         "--out", str(tmp_path / "ev"), "--full-scale"])
        capsys.readouterr()
        assert code == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert report["meta"]["reference_full_scale"] == REFERENCE_FULL_SCALE
        assert not any("pass" in k or "threshold" in k for k in report["meta"])
        d["status"] = "NOT REPRODUCIBLE AT DESK SCALE (documented; full-scale mode reports without thresholds)"
