"""The ten headline acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line and the session ends with a
summary of all of them. Criteria 8 and 9 train real toy models and take
several minutes each on one core.
"""
import time

import numpy as np
import pytest
import torch

from retfuse import checkpoint, data_io, losses, metrics, training
from retfuse.config import TrainConfig
from retfuse.encoder import DetailCNNEncoder, EncoderConfig
from retfuse.losses import LossWeights
from retfuse.metrics import COLUMNS
from retfuse.topology import GraphInfoUpdate, TAEConfig
from retfuse.vessel_graph import extract_graph

import gradient_cases
import oracles
import skeleton_cases
from test_topology import gat_against_oracle, permuted, random_graph

TOY = TrainConfig(toy_mode=True, seed=0, deterministic=True)
WINDOW = 20  # steps averaged at each end of the stage-2 loss curve


@pytest.fixture(scope="module")
def toy_train():
    return data_io.synthetic_dataset(8, seed=0)


@pytest.fixture(scope="module")
def toy_eval():
    return data_io.synthetic_dataset(4, seed=100)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))[None, None]


def test_01_gat_oracle(criterion):
    with criterion(1, "GAT layer vs brute force on 20 random graphs, rows sum to 1"):
        t0 = time.perf_counter()
        for seed in range(20):
            out, ref, amap, got, alphas, n = gat_against_oracle(seed)
            assert n <= 10
            assert np.abs(out - ref).max() <= 1e-6
            assert got.keys() == alphas.keys()
            assert max(abs(got[k] - alphas[k]) for k in got) <= 1e-6
            assert (amap.row_sums(n) - 1).abs().max() <= 1e-6
        assert time.perf_counter() - t0 < 10


def test_02_loss_identities(criterion):
    with criterion(2, "loss identities and closed forms"):
        rng = np.random.default_rng(0)
        x = t(rng.random((8, 9)))
        assert losses.recon_loss(x, x.clone()).item() == 0.0
        a, b = t(rng.random((7, 9))), t(rng.random((7, 9)))
        assert losses.recon_loss(a.flip(-1), b.flip(-1)).item() == pytest.approx(
            losses.recon_loss(a, b).item(), abs=1e-12)

        d1, d2 = t([[1.0, -1.0], [0.0, 0.0]]), t([[0.0, 0.0], [1.0, -1.0]])
        base = t([[1.0, 2.0], [3.0, 4.0]])
        assert losses.decomp_loss(base, base, d1, d2).item() == 0.0
        bb, dd = t(rng.random((5, 5))), t(rng.random((5, 5)))
        assert abs(losses.decomp_loss(bb, bb, dd, dd).item() - 1 / 2.01) <= 1e-9
        d = t([[0.3, 0.1], [0.7, 0.2]])
        assert abs(losses.decomp_loss(d1, d2, d, -d).item() - 1 / 1.01) <= 1e-9

        g = t(rng.normal(size=(6, 6)))
        for c in (0.5, 2.0, 10.0):
            assert abs(losses.graph_loss(g, c * g).item()) <= 1e-9
        e1, e2 = t([[1.0, 0.0]]), t([[0.0, 1.0]])
        assert losses.graph_loss(e1, e2).item() == 1.0
        assert losses.graph_loss(e1, -e1).item() == 2.0

        p, q = t(rng.random((4, 4))), t(rng.random((4, 4)))
        assert losses.stage2_intensity_loss(torch.maximum(p, q), p, q).item() == 0.0
        assert losses.grad_loss(p, p.clone(), p.clone()).item() == 0.0

        s1 = ("recon1", "recon2", "decomp", "graph")
        s2 = ("intensity", "graph", "grad", "decomp")
        w = LossWeights()
        for names, total_fn, unit_total in ((s1, losses.total_stage1, 4.5),
                                            (s2, losses.total_stage2, 13.5)):
            zeros = {k: torch.tensor(0.0, dtype=torch.float64) for k in names}
            ones = {k: torch.tensor(1.0, dtype=torch.float64) for k in names}
            assert total_fn(zeros, w).total.item() == 0.0
            assert total_fn(ones, w).total.item() == unit_total
            for k in names:
                scaled = dict(ones, **{k: torch.tensor(3.0, dtype=torch.float64)})
                coef = total_fn(dict(zeros, **{k: ones[k]}), w).total.item()
                assert total_fn(scaled, w).total.item() == unit_total + 2 * coef


def test_03_gradient_checks(criterion):
    with criterion(3, "finite-difference gradients for every block and loss"):
        t0 = time.perf_counter()
        cases = gradient_cases.cases()
        names = {c[0] for c in cases}
        assert {"SFE", "BTE", "DCE", "S2G", "GIU", "G2S", "fusion", "decoder"} <= names
        for name, fn, inputs, params in cases:
            err = oracles.fd_rel_error(fn, inputs, params)
            assert err < 1e-3, (name, err)
        assert time.perf_counter() - t0 < 300


def test_04_dce_invertible(criterion):
    with criterion(4, "detail encoder round trip on 100 random inputs"):
        worst = 0.0
        for k in range(100):
            torch.manual_seed(k)
            rng = np.random.default_rng(k)
            dim = int(rng.choice([4, 8, 16]))
            cfg = EncoderConfig(embed_dim=dim, attention_heads=2, inn_blocks=int(rng.integers(1, 4)))
            dce = DetailCNNEncoder(cfg)
            x = torch.randn(1, dim, int(rng.integers(2, 20)), int(rng.integers(2, 20)))
            with torch.no_grad():
                worst = max(worst, (dce.inverse(dce(x)) - x).abs().max().item())
        assert worst < 1e-4, worst


def test_05_giu_permutation_equivariance(criterion):
    with criterion(5, "graph update equivariant under 50 node permutations"):
        rng = np.random.default_rng(5)
        torch.manual_seed(5)
        giu = GraphInfoUpdate(6, TAEConfig(giu_heads=4, giu_head_dim=5))
        g = random_graph(rng, 10)
        x = torch.randn(10, 6)
        with torch.no_grad():
            ref = giu(x, g)
            for _ in range(50):
                perm = rng.permutation(10)
                out = giu(x[perm], permuted(g, perm))
                assert (out - ref[perm]).abs().max().item() <= 1e-6


def test_06_skeleton_oracle(criterion):
    with criterion(6, "graph extraction on 10 hand-built skeletons"):
        assert len(skeleton_cases.CASES) == 10
        for name, build in skeleton_cases.CASES.items():
            sk, nodes, edges = build()
            g = extract_graph(sk)
            assert g.node_set() == nodes, name
            assert g.edge_set() == edges, name


def test_07_metric_oracle(criterion):
    with criterion(7, "eight metrics vs brute force on 20 random 16x16 triples"):
        for seed in range(20):
            f, a, b = (np.random.default_rng([seed, k]).random((16, 16)) for k in range(3))
            got = metrics.evaluate_pair(f, a, b)
            ref = oracles.reference_report(f, a, b)
            for c in COLUMNS:
                assert abs(getattr(got, c) - ref[c]) <= 1e-6, (seed, c)
            assert metrics.mutual_information(a, a) == metrics.entropy(a)
            assert metrics.ssim(a, a) == 1.0


@pytest.mark.slow
def test_08_end_to_end_toy_run(criterion, toy_train, toy_eval):
    with criterion(8, "toy run: reconstruction, stage-2 convergence, beats averaging"):
        t0 = time.perf_counter()
        items = training.prepare_dataset(toy_train, TOY)
        s1 = training.train_stage1(items, TOY)
        assert len(s1.totals) == 200
        model1 = training.model_from_checkpoint(s1.checkpoint)
        rec = training.reconstruction_ssim(model1, items)
        s2 = training.train_stage2(items, TOY, s1.checkpoint)
        totals = s2.totals
        assert len(totals) == 200
        early, late = np.mean(totals[:WINDOW]), np.mean(totals[-WINDOW:])

        model2 = training.model_from_checkpoint(s2.checkpoint)
        fused, avg = [], []
        for it in training.prepare_dataset(toy_eval, TOY):
            p = it.pair
            fused.append(metrics.evaluate_pair(training.fuse_prepared(model2, it), p.image1, p.image2))
            avg.append(metrics.evaluate_pair(training.naive_average(p), p.image1, p.image2))
        fm, am = metrics.mean_report(fused), metrics.mean_report(avg)
        elapsed = time.perf_counter() - t0
        print(f"reconstruction SSIM {rec:.3f}; stage-2 loss {early:.3f} -> {late:.3f}; "
              f"fused SSIM+QABF {fm.SSIM + fm.QABF:.3f} vs average {am.SSIM + am.QABF:.3f}; "
              f"{elapsed:.0f}s")
        assert rec >= 0.8
        assert late <= 0.5 * early
        assert fm.SSIM + fm.QABF > am.SSIM + am.QABF
        assert elapsed < 20 * 60


@pytest.mark.slow
def test_09_ablation_ordering(criterion, toy_train, toy_eval):
    with criterion(9, "variant III is strictly worst on SSIM"):
        rows = training.run_ablation(toy_train, toy_eval, TOY)
        print("\n" + training.format_ablation(rows))
        ssim = {r.variant: r.report.SSIM for r in rows}
        worst = ssim.pop("III")
        assert all(worst < v for v in ssim.values()), (worst, ssim)


def test_10_determinism(criterion):
    with criterion(10, "two seeded runs give identical logs and fused bits"):
        cfg = TrainConfig(toy_mode=True, seed=3, deterministic=True, stage1_epochs=2,
                          stage2_epochs=2, max_steps=6)
        data = data_io.synthetic_dataset(3, seed=7)
        probe = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(seed=99))
        runs = []
        for _ in range(2):
            s1 = training.train_stage1(data, cfg)
            s2 = training.train_stage2(data, cfg, s1.checkpoint)
            out = training.fuse(probe, s2.checkpoint)
            runs.append((s1.log + s2.log, checkpoint.checkpoint_bytes(s2.checkpoint),
                         out.fused.tobytes()))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert runs[0][2] == runs[1][2]
