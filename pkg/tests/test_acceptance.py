"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every criterion prints one [PASS]/[FAIL] line; the lines are repeated in the
"acceptance criteria" section of the pytest terminal summary.
"""

from __future__ import annotations

import numpy as np
import pytest

from _acceptance import criterion
from oracles import (assignment_cost, brute_assignment_cost, brute_knn, loop_conv_agg, loop_gin, loop_max_relative,
                     loop_mean, random_neighbor_table)
from swgformer.blocks import (FeedForward, MSConv, MSConvConfig, MultiHeadSelfAttention, SwGBlockConfig,
                              SwGFormerBlock, swg_former_block_forward)
from swgformer.experiments import DESK_TRAIN, build_desk_dataset, format_ablation, run_ablation, run_desk_learning
from swgformer.features import (EventSpec, SceneSpec, SpectralConfig, intensity_vectors, iv_directions, stft,
                                synth_foa_scene, unit_vector)
from swgformer.gradsuite import run_all
from swgformer.graph import SwGModule, baseline_agg, chunk_time, conv2d_agg, knn_graph, unchunk
from swgformer.metrics import Event, FrameEvents, direction, evaluate, hungarian, location_dependent_sed, seld_score
from swgformer.model import accdoa_decode, accdoa_encode, decoded_to_rows, desk_config
from swgformer.numerics import Tensor


@pytest.fixture(scope="module")
def desk_data():
    return build_desk_dataset(n_clips=200, n_classes=4, n_val=40, seed=0)


def test_criterion_01_seld_formula():
    with criterion(1, "SELD score of the published component metrics within +/-0.0005") as info:
        swg = seld_score(0.64, 0.452, 24.5, 0.657)
        conv = seld_score(0.65, 0.484, 21.5, 0.704)
        info["SwG-former"] = f"{swg:.7f} vs 0.416 (diff {abs(swg - 0.416):.5f})"
        info["Conv-Conformer"] = f"{conv:.7f} vs 0.396 (diff {abs(conv - 0.396):.5f})"
        assert abs(swg - 0.416) <= 0.0005, info["SwG-former"]
        assert abs(conv - 0.396) <= 0.0005, info["Conv-Conformer"]


def test_criterion_02_hungarian_oracle():
    with criterion(2, "Hungarian equals exhaustive minimum on 1000 matrices up to 6x6", budget_s=10) as info:
        rng = np.random.default_rng(2)
        for trial in range(1000):
            m, n = (int(v) for v in rng.integers(1, 7, size=2))
            D = rng.uniform(0.0, 180.0, size=(m, n))
            A = hungarian(D)
            assert A.sum() == min(m, n)
            ours = assignment_cost(D, zip(*np.nonzero(A)))
            assert ours == brute_assignment_cost(D), (trial, D)
        info["trials"] = 1000


def test_criterion_03_aggregator_oracles():
    with criterion(3, "aggregators equal loop oracles to 1e-12 on 100 instances", budget_s=10) as info:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(1, 17))
            n = int(rng.integers(k + 1, 65))
            t = int(rng.integers(1, 9))
            h = rng.standard_normal((n, t))
            idx = random_neighbor_table(rng, n, k)
            w, b, eps = rng.standard_normal(k), float(rng.standard_normal()), float(rng.standard_normal())
            pairs = [
                (conv2d_agg(Tensor(h), idx, Tensor(w), Tensor([b])).data, loop_conv_agg(h, idx, w, b)),
                (baseline_agg(Tensor(h), idx, "max_relative").data, loop_max_relative(h, idx)),
                (baseline_agg(Tensor(h), idx, "sage_mean").data, loop_mean(h, idx)),
                (baseline_agg(Tensor(h), idx, "gin_sum", Tensor(eps)).data, loop_gin(h, idx, eps)),
            ]
            for got, want in pairs:
                worst = max(worst, float(np.abs(got - want).max()))
        info["max_abs_err"] = f"{worst:.2e}"
        assert worst <= 1e-12


def test_criterion_04_gradient_suite():
    with criterion(4, "finite-difference gradient suites (op < 1e-4, model < 1e-3)", budget_s=300) as info:
        results = run_all(seed=0, include_model=True)
        failed = [f"{r.name}={r.max_rel_err:.1e}" for r in results if not r.ok]
        worst = max(results, key=lambda r: r.max_rel_err / r.tol)
        info["cases"] = len(results)
        info["closest_to_tol"] = f"{worst.name} {worst.max_rel_err:.1e}/{worst.tol:.0e}"
        names = {r.name for r in results}
        assert {"feed_forward", "mhsa", "swg_module_conv2d_agg", "swg_former_block", "ms_conv", "reduced_model"} <= names
        info["reduced_model"] = next(f"{r.max_rel_err:.1e}" for r in results if r.name == "reduced_model")
        assert not failed, failed


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0


def test_criterion_05_structural_identities():
    with criterion(5, "chunk round trip, ACCDOA round trip, residual identities") as info:
        rng = np.random.default_rng(5)
        n_pairs = 0
        for T in range(1, 251):
            x = rng.standard_normal((T, 2, 3))
            for t in (d for d in range(1, T + 1) if T % d == 0):
                assert np.array_equal(unchunk(chunk_time(x, t)), x), (T, t)
                n_pairs += 1
        info["(T,t) pairs"] = n_pairs

        rows = sorted({(l, int(c), 0, float(rng.integers(-180, 180)), float(rng.integers(-89, 90)))
                       for l in range(50) for c in rng.choice(13, size=int(rng.integers(0, 4)), replace=False)})
        back = decoded_to_rows(accdoa_decode(accdoa_encode(rows, 13, 50), 0.5))
        assert [r[:3] for r in back] == [r[:3] for r in rows]
        assert np.allclose([r[3:] for r in back], [r[3:] for r in rows], atol=1e-9)

        seq = rng.standard_normal((2, 10, 24))
        ff = FeedForward(24, 4, 0.05, rng)
        _zero(ff)
        assert np.array_equal(ff(Tensor(seq)).data, seq)
        att = MultiHeadSelfAttention(24, 4, 0.05, rng)
        _zero(att)
        assert np.array_equal(att(Tensor(seq)).data, seq)
        swg = SwGModule(5, 4, rng)
        _zero(swg)
        assert not np.any(swg(Tensor(seq.reshape(2, 10, 4, 6))).data)
        block = SwGFormerBlock(SwGBlockConfig(t=5, k=4, d_model=24, n_heads=4), 4, 6, rng)
        for layer in block.layers:
            _zero(layer)
        ln = (seq - seq.mean(-1, keepdims=True)) / np.sqrt(seq.var(-1, keepdims=True) + 1e-5)
        out = swg_former_block_forward(Tensor(seq.reshape(2, 10, 4, 6)), block).data
        assert np.allclose(out, ln.reshape(2, 10, 4, 6), atol=1e-12)
        ms = MSConv(MSConvConfig(3, 3), rng)
        ms.w1.data[...] = 0
        ms.w2.data[...] = 0
        ms.eval()
        img = rng.standard_normal((2, 3, 6, 8))
        assert np.array_equal(ms(Tensor(img)).data, img.reshape(2, 3, 6, 4, 2).max(-1))
        info["blocks"] = "FF, MHSA, SwG, SwG-former, MS-Conv"


def test_criterion_06_knn():
    with criterion(6, "KNN equals full-sort brute force on 100 instances; tie rule") as info:
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            h = rng.standard_normal((n, int(rng.integers(1, 8))))
            k = int(rng.integers(1, n))
            d = ((h[:, None] - h[None]) ** 2).sum(-1)[np.triu_indices(n, 1)]
            assert len(np.unique(d)) == len(d)  # distinct distances
            first = knn_graph(h, k).indices
            assert np.array_equal(first, brute_knn(h, k))
            assert np.array_equal(first, knn_graph(h, k).indices)
        const = knn_graph(np.full((8, 3), 0.7), 5).indices
        for i in range(8):
            assert const[i].tolist() == [j for j in range(8) if j != i][:5]
        info["instances"] = 100


def test_criterion_07_metric_axioms():
    with criterion(7, "perfect / empty / hand-counted metric axioms") as info:
        ref = [[Event(c, direction(30.0 * c, 10.0), 0) for c in range(3) if (l + c) % 3] for l in range(40)]
        perfect = evaluate(FrameEvents(ref, ref), 4)
        assert (perfect.ER, perfect.F20, perfect.LE, perfect.LR_CD, perfect.SELD) == (0.0, 1.0, 0.0, 1.0, 0.0)
        empty = evaluate(FrameEvents(ref, [[] for _ in ref]), 4)
        assert (empty.ER, empty.F20, empty.LE, empty.LR_CD) == (1.0, 0.0, 180.0, 0.0) and empty.le_flagged
        hand = location_dependent_sed(FrameEvents([[Event(0, direction(0, 0)), Event(1, direction(90, 0))]],
                                                  [[Event(0, direction(10, 0)), Event(2, direction(-90, 0))]]), 3)
        assert (hand.S, hand.er, hand.f20) == (1, 0.5, 0.5)
        info["empty_LE"] = "180 flagged"


@pytest.mark.slow
def test_criterion_08_desk_learning(desk_data):
    with criterion(8, "desk-scale learning: LE < 45 deg, LR_CD > 0.5, untrained ~ 90 deg", budget_s=900) as info:
        assert DESK_TRAIN.max_steps <= 2000
        cfg = desk_config()
        assert (cfg.n_blocks, cfg.d_model, cfg.window_group, cfg.n_classes) == (2, 64, (5, 25), 4)
        out = run_desk_learning(desk_data, cfg, DESK_TRAIN, time_budget=660)
        t = out.trained
        info["steps"] = out.steps
        info["trained"] = f"LE {t.LE:.1f} LR_CD {t.LR_CD:.3f} ER {t.ER:.3f} F20 {t.F20:.3f} SELD {t.SELD:.3f}"
        info["untrained_direction_LE"] = f"{out.untrained_direction_le:.1f}"
        info["untrained_decoded"] = f"LE {out.untrained.LE:.1f}{' flagged' if out.untrained.le_flagged else ''} " \
                                    f"LR_CD {out.untrained.LR_CD:.3f}"
        assert out.steps <= 2000
        assert t.LE < 45.0 and not t.le_flagged
        assert t.LR_CD > 0.5
        assert abs(out.untrained_direction_le - 90.0) < 20.0
        assert out.trained_direction_le < out.untrained_direction_le


@pytest.mark.slow
def test_criterion_09_ablation_harness(desk_data):
    with criterion(9, "ablation harness: 4 orders, 4 aggregators, k in {18,24,30}", budget_s=1800) as info:
        rows = run_ablation(desk_data, epochs=1)
        print(format_ablation(rows))
        assert [r.table for r in rows].count("order") == 4
        assert [r.table for r in rows].count("aggregator") == 4
        assert [r.label for r in rows if r.table == "k"] == ["k=18", "k=24", "k=30"]
        for r in rows:
            m = r.report
            assert np.isfinite(r.train_loss) and m.ER >= 0 and 0 <= m.F20 <= 1 and 0 <= m.LE <= 180
            assert 0 <= m.LR_CD <= 1 and np.isfinite(m.SELD)
        best = {tbl: min((r for r in rows if r.table == tbl), key=lambda r: r.report.SELD).label
                for tbl in ("order", "aggregator", "k")}
        info["best_by_SELD"] = best


def test_criterion_10_iv_identity():
    with criterion(10, "IV direction within 1 deg median for 20 random point sources", budget_s=30) as info:
        rng = np.random.default_rng(10)
        cfg = SpectralConfig()
        errs = []
        for _ in range(20):
            az = float(rng.uniform(-180, 180))
            el = float(np.degrees(np.arcsin(rng.uniform(-1, 1))))
            cls = int(rng.integers(4))
            clip, _ = synth_foa_scene(SceneSpec([EventSpec(cls, 1.0, 4.0, az, el)], 5.0, 4), rng)
            d = iv_directions(intensity_vectors(stft(clip, cfg), cfg))
            centres = (np.arange(d.shape[0]) * cfg.hop + cfg.n_fft / 2) / cfg.sample_rate
            active = (centres > 1.05) & (centres < 3.95)
            cos = np.clip(d[active] @ unit_vector(az, el), -1, 1)
            errs.append(float(np.median(np.degrees(np.arccos(cos)))))
        info["worst_median_err_deg"] = f"{max(errs):.2e}"
        assert max(errs) < 1.0
