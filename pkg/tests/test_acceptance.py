"""Acceptance criteria 1-8.  Each test prints one PASS/FAIL line in the
terminal summary (see conftest.py).

Criteria 6-8 share pipeline runs through module-scoped fixtures; the whole
module takes a few minutes on one CPU core.
"""
import csv
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from isdmae import cli
from isdmae import model as M
from isdmae import numcore as nc
from isdmae.data import PhantomSpec, gen_phantoms, load_dataset
from isdmae.masking import IntensityMaskSpec, SpatialMaskSpec, intensity_mask, mask_stats, spatial_mask
from isdmae.numcore import Tensor
from isdmae.objectives import contrastive_loss, dice, hausdorff, roc_auc, ssim, ssim_loss
from isdmae.preprocess import LUNG_WINDOW, MEDIASTINAL_WINDOW, apply_window, sobel_magnitude
from isdmae.training import RunConfig, load_checkpoint, pretrain_loss, run_pretrain

import oracles
from conftest import criterion
from gradcheck import check_gradients, check_gradients_sampled

ROOT = Path(__file__).resolve().parents[1]
FINETUNE_CFG = ROOT / "configs" / "desk_finetune.cfg"
SEEDS = range(20)

# frozen after the calibration run recorded in the project notes
DICE_THRESHOLD = 0.70
LOSS_RATIO_THRESHOLD = 0.7
WALL_LIMIT_S = 600.0


# ----------------------------------------------------------------------
# 1. gradient suite
# ----------------------------------------------------------------------

def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _grad_cases():
    def elementwise(op, lo=-2.0, hi=2.0, away_from_zero=False):
        def make(rng):
            a = rng.uniform(lo, hi, size=(3, 4))
            b = rng.uniform(0.5, 2.0, size=(3, 4))
            if away_from_zero:
                a = np.where(np.abs(a) < 1e-2, 0.5, a)
            w = _weights(rng, (3, 4))
            if op in ("add", "sub", "mul", "div"):
                return (lambda t: nc.tsum(nc.elementwise(op, t[0], t[1]) * w)), [a, b]
            return (lambda t: nc.tsum(nc.elementwise(op, t[0]) * w)), [a]
        return make

    def matmul(rng):
        return (lambda t: nc.tsum(nc.matmul(t[0], t[1]) * nc.matmul(t[0], t[1]))), [
            rng.normal(size=(3, 4)), rng.normal(size=(4, 3))]

    def conv(stride, padding, k, size):
        def make(rng):
            w_out = _weights(rng, (2, 3, (size + 2 * padding - k) // stride + 1,
                                   (size + 2 * padding - k) // stride + 1))
            return (lambda t: nc.tsum(nc.conv2d(t[0], t[1], t[2], stride=stride, padding=padding) * w_out)), [
                rng.normal(size=(2, 2, size, size)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)]
        return make

    def avg_pool(rng):
        w = _weights(rng, (2, 2, 2))
        return (lambda t: nc.tsum(nc.avg_pool(t[0], 2) * w)), [rng.normal(size=(2, 4, 4))]

    def global_pool(rng):
        w = _weights(rng, (2, 3))
        return (lambda t: nc.tsum(nc.global_avg_pool(t[0]) * w)), [rng.normal(size=(2, 3, 3, 3))]

    def upsample(rng):
        w = _weights(rng, (2, 6, 6))
        return (lambda t: nc.tsum(nc.upsample_nearest(t[0], 2) * w)), [rng.normal(size=(2, 3, 3))]

    def concat(rng):
        w = _weights(rng, (3, 3, 3))
        return (lambda t: nc.tsum(nc.concat_channels(t[0], t[1]) * w)), [
            rng.normal(size=(1, 3, 3)), rng.normal(size=(2, 3, 3))]

    def softmax_ce(rng):
        labels = list(rng.integers(0, 5, size=4))
        return (lambda t: nc.softmax_cross_entropy(t[0], labels)), [rng.normal(size=(4, 5)) * 2]

    def bce(rng):
        y = (rng.random((3, 4)) > 0.5).astype(float)
        return (lambda t: nc.bce_with_logits(t[0], y)), [rng.normal(size=(3, 4)) * 2]

    def group_norm(rng):
        w = _weights(rng, (2, 4, 3, 3))
        return (lambda t: nc.tsum(nc.group_norm(t[0], 2, t[1], t[2]) * w)), [
            rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)]

    def ssim_case(rng):
        return (lambda t: ssim(t[0], t[1])), [rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3, 3))]

    def ssim_loss_case(rng):
        x = rng.uniform(size=(2, 3, 3, 3))
        return (lambda t: ssim_loss(Tensor(x), t[0], t[1])[0]), [
            rng.uniform(size=x.shape), rng.uniform(size=x.shape)]

    def contrastive(rng):
        return (lambda t: contrastive_loss(t[0], t[1])), [rng.normal(size=(4, 6)), rng.normal(size=(4, 6))]

    cases = {f"elementwise.{op}": elementwise(op) for op in ("add", "sub", "mul", "div", "exp")}
    cases["elementwise.relu"] = elementwise("relu", away_from_zero=True)
    cases["elementwise.sigmoid"] = elementwise("sigmoid", -4, 4)
    cases["elementwise.log"] = elementwise("log", 0.1, 3.0)
    cases["elementwise.sqrt"] = elementwise("sqrt", 0.1, 3.0)
    cases.update({
        "matmul": matmul,
        "conv2d.3x3.s1.p1": conv(1, 1, 3, 5),
        "conv2d.3x3.s2.p1": conv(2, 1, 3, 5),
        "conv2d.2x2.s2.p0": conv(2, 0, 2, 4),
        "avg_pool": avg_pool,
        "global_avg_pool": global_pool,
        "upsample_nearest": upsample,
        "concat": concat,
        "softmax_cross_entropy": softmax_ce,
        "bce_with_logits": bce,
        "group_norm": group_norm,
        "ssim": ssim_case,
        "ssim_loss": ssim_loss_case,
        "contrastive": contrastive,
    })
    return cases


def _tiny_total_loss_case(seed):
    cfg = RunConfig.for_phase("pretrain")
    cfg.model = M.ModelConfig(input_size=8, num_stages=2, stage_channels=[4, 8], decoder_channels=4,
                              embed_dim=6, norm_groups=2)
    cfg.train.patch, cfg.train.k_bins = 2, 4
    params = M.init_params(cfg.model, seed, dtype=np.float64)
    names = M.trainable_names(params, "pretrain")
    images = np.random.default_rng(seed).uniform(0, 1, size=(2, 3, 8, 8))

    def build(leaves):
        p = dict(params)
        p.update(zip(names, leaves))
        return pretrain_loss(images, [2 * seed, 2 * seed + 1], p, cfg)[0]

    return build, [params[n].data for n in names]


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite (rel 1e-4 / abs 1e-7, 20 seeds per op)") as notes:
        start = time.perf_counter()
        worst = 0.0
        cases = _grad_cases()
        for name, make in cases.items():
            for seed in SEEDS:
                build, inputs = make(np.random.default_rng(1000 + seed))
                try:
                    worst = max(worst, check_gradients(build, inputs))
                except AssertionError as exc:
                    raise AssertionError(f"{name} seed {seed}: {exc}") from exc
        for seed in SEEDS:
            build, inputs = _tiny_total_loss_case(seed)
            try:
                worst = max(worst, check_gradients_sampled(build, inputs, 40, np.random.default_rng(seed), h=1e-6))
            except AssertionError as exc:
                raise AssertionError(f"end-to-end L_total seed {seed}: {exc}") from exc
        elapsed = time.perf_counter() - start
        notes.append(f"{len(cases) + 1} ops x {len(SEEDS)} seeds, worst rel err {worst:.2e}, {elapsed:.1f}s")
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s (limit 120s)"


# ----------------------------------------------------------------------
# 2. loss identities
# ----------------------------------------------------------------------

def test_criterion_2_loss_identities(phantom_images):
    with criterion(2, "loss identities") as notes:
        x = Tensor(phantom_images[:4])
        loss, _, _ = ssim_loss(x, x, x)
        assert abs(float(loss.data)) <= 1e-6, f"perfect reconstruction SSIM loss {float(loss.data)}"
        notes.append(f"L_ssim(perfect)={float(loss.data):.1e}")

        rng = np.random.default_rng(0)
        single = contrastive_loss(Tensor(rng.normal(size=(1, 128))), Tensor(rng.normal(size=(1, 128))))
        assert float(single.data) == 0.0, f"B=1 contrastive loss {float(single.data)}"

        eye = contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(2))).item()
        assert abs(eye - 0.067659) <= 1e-5, f"B=2 orthonormal loss {eye}"
        notes.append(f"L_cons(B=2 identity)={eye:.6f}")

        cfg = RunConfig.for_phase("pretrain")
        params = M.init_params(cfg.model, 0)
        for i in range(5):
            total, rep = pretrain_loss(phantom_images[2 * i : 2 * i + 8], list(range(8 * i, 8 * i + 8)),
                                       params, cfg)
            assert rep.total == rep.ssim_loss + rep.contrastive_loss
            assert total.data[()] == rep.total
        notes.append("L_total == L_ssim + L_cons bit-exact on 5 float32 batches")


# ----------------------------------------------------------------------
# 3. mask correctness
# ----------------------------------------------------------------------

def test_criterion_3_masks():
    with criterion(3, "mask correctness") as notes:
        rng = np.random.default_rng(3)
        for trial in range(200):
            h, w = 4 * int(rng.integers(1, 5)), 4 * int(rng.integers(1, 5))
            img = rng.uniform(0, 255, size=(3, h, w))
            if trial % 3 == 0:
                img[:, rng.random((h, w)) < 0.2] = 0.0
            k = int(rng.integers(2, 33))
            m_target = int(rng.integers(1, k + 1))
            ratio = (m_target - 0.2) / k if m_target > 1 else 0.6 / k
            spec = IntensityMaskSpec(k, min(ratio, 0.999), int(rng.integers(0, 2**62)))
            out, chosen = intensity_mask(img, spec)
            assert len(chosen) == spec.num_bins_masked
            bins = oracles.gray_pixel_bins(img, k)
            for i, j in itertools.product(range(h), range(w)):
                expect_zero = bins[i][j] in chosen
                got = out[:, i, j]
                assert (np.all(got == 0) if expect_zero else np.array_equal(got, img[:, i, j])), \
                    f"trial {trial}: pixel {(i, j)} misclassified"

            p = int(rng.choice([1, 2, 4]))
            s_ratio = float(rng.uniform(0.05, 0.95))
            s_spec = SpatialMaskSpec(p, s_ratio, int(rng.integers(0, 2**62)))
            solid = rng.uniform(1, 255, size=(3, h, w))
            s_out, s_chosen = spatial_mask(solid, s_spec)
            n_patches = (h // p) * (w // p)
            expected = math.floor(n_patches * s_ratio) * p * p
            for c in range(3):
                assert int((s_out[c] == 0).sum()) == expected, f"trial {trial}: channel {c} zero count"
            zero = np.all(s_out == 0, axis=0).reshape(h // p, p, w // p, p).all(axis=(1, 3))
            assert {int(i) for i in np.flatnonzero(zero)} == set(s_chosen)
        notes.append("200 (image, spec, seed) triples re-classified per pixel")

        img = np.random.default_rng(4).uniform(0, 255, size=(3, 32, 32))
        img[:, :3, :] = 0.0
        nonzero = np.any(img != 0, axis=0)
        spec = IntensityMaskSpec(16, 0.5)
        bins = np.array(oracles.gray_pixel_bins(img, 16))
        counts = [int((nonzero & (bins == b)).sum()) for b in range(16)]
        mean, var = oracles.finite_population_moments(counts, spec.num_bins_masked)
        total = nonzero.sum()
        fracs = [mask_stats(intensity_mask(img, spec.with_seed(s))[0], img)["masked_fraction"] for s in range(1000)]
        pred, sd = mean / total, math.sqrt(var) / total / math.sqrt(1000)
        z_int = abs(np.mean(fracs) - pred) / sd
        assert z_int < 3, f"intensity masked fraction {np.mean(fracs):.4f} vs {pred:.4f} ({z_int:.2f} sigma)"

        s_spec = SpatialMaskSpec(4, 0.5)
        patch_counts = nonzero.reshape(8, 4, 8, 4).sum(axis=(1, 3)).ravel()
        mean, var = oracles.finite_population_moments(patch_counts, 32)
        fracs = [mask_stats(spatial_mask(img, s_spec.with_seed(s))[0], img)["masked_fraction"] for s in range(1000)]
        pred, sd = mean / total, math.sqrt(var) / total / math.sqrt(1000)
        z_sp = abs(np.mean(fracs) - pred) / sd
        assert z_sp < 3, f"spatial masked fraction {np.mean(fracs):.4f} vs {pred:.4f} ({z_sp:.2f} sigma)"
        notes.append(f"Monte-Carlo over 1000 seeds: intensity {z_int:.2f} sigma, spatial {z_sp:.2f} sigma")


# ----------------------------------------------------------------------
# 4. metric oracles
# ----------------------------------------------------------------------

def _oracle_tables():
    """Vectorized brute force over every nonempty 3×3 mask pair."""
    masks = np.array([m for m in oracles.all_masks(3, 3)][1:])
    flat = masks.reshape(len(masks), 9)
    cells = np.argwhere(np.ones((3, 3), bool)).astype(float)
    dist = np.sqrt(((cells[:, None] - cells[None]) ** 2).sum(-1))
    # nearest[b, i]: distance from cell i to the closest foreground cell of mask b
    nearest = np.where(flat[:, None, :], dist[None], np.inf).min(axis=2)
    directed = np.where(flat[:, None, :], nearest[None, :, :], -np.inf).max(axis=2)
    hd = np.maximum(directed, directed.T)
    inter = flat.astype(int) @ flat.T.astype(int)
    sizes = flat.sum(1)
    dc = 2 * inter / (sizes[:, None] + sizes[None, :])
    return masks, dc, hd


def test_criterion_4_metric_oracles():
    with criterion(4, "metric oracles") as notes:
        start = time.perf_counter()
        masks, dc, hd = _oracle_tables()
        n = len(masks)
        for i in range(n):
            for j in range(n):
                d = dice(masks[i], masks[j])
                h = hausdorff(masks[i], masks[j])
                if abs(d - dc[i, j]) > 1e-12 or abs(h - hd[i, j]) > 1e-12:
                    raise AssertionError(f"3x3 pair {i},{j}: dice {d} vs {dc[i, j]}, hd {h} vs {hd[i, j]}")
        notes.append(f"{n * n} exhaustive 3x3 pairs")

        rng = np.random.default_rng(44)
        for k in range(500):
            p = rng.random((16, 16)) < rng.uniform(0.02, 0.5)
            g = rng.random((16, 16)) < rng.uniform(0.02, 0.5)
            p[rng.integers(16), rng.integers(16)] = True
            g[rng.integers(16), rng.integers(16)] = True
            assert dice(p, g) == pytest.approx(oracles.dice(p, g), abs=1e-12), f"16x16 pair {k} dice"
            assert hausdorff(p, g) == pytest.approx(oracles.hausdorff(p, g), abs=1e-12), f"16x16 pair {k} hd"
        notes.append("500 random 16x16 pairs")

        for k in range(200):
            n_items = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n_items)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.uniform(size=n_items), int(rng.integers(1, 3)))
            assert roc_auc(scores, labels) == pytest.approx(oracles.roc_auc(scores, labels), abs=1e-12), \
                f"roc instance {k}"
        elapsed = time.perf_counter() - start
        notes.append(f"200 ROC instances, {elapsed:.1f}s")
        assert elapsed < 60, f"metric oracles took {elapsed:.1f}s (limit 60s)"


# ----------------------------------------------------------------------
# 5. preprocessing spot values
# ----------------------------------------------------------------------

def test_criterion_5_preprocessing_spot_values():
    with criterion(5, "preprocessing spot values") as notes:
        assert apply_window(np.array([-500.0]), LUNG_WINDOW)[0] == 127.5
        assert apply_window(np.array([30.0]), MEDIASTINAL_WINDOW)[0] == 127.5
        assert apply_window(np.array([400.0]), LUNG_WINDOW)[0] == 255.0
        assert apply_window(np.array([-1200.0]), LUNG_WINDOW)[0] == 0.0
        assert apply_window(np.array([-200.0]), MEDIASTINAL_WINDOW)[0] == 0.0
        assert apply_window(np.array([500.0]), MEDIASTINAL_WINDOW)[0] == 255.0
        for c in (1.0, 37.5, 255.0):
            img = np.zeros((7, 8))
            img[:, 4:] = c
            mag = sobel_magnitude(img)
            assert np.all(mag[1:-1, 3:5] == 4 * c)
            assert np.all(np.delete(mag[1:-1], [3, 4], axis=1) == 0)
            assert np.array_equal(sobel_magnitude(img.T), mag.T)
        notes.append("window midpoints 127.5, clamps at 0/255, step edge 4c")


# ----------------------------------------------------------------------
# 6-8. smoke pipeline
# ----------------------------------------------------------------------

def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"isdmae {' '.join(map(str, argv))} exited {code}"


def _run_pipeline(root: Path, mask_mode: str) -> dict:
    data = root / "phantoms"
    start = time.perf_counter()
    _cli("gen-phantoms", "--count", 64, "--size", 32, "--seed", 0, "--out", data)
    _cli("pretrain", "--data", data, "--epochs", 10, "--mask-mode", mask_mode, "--seed", 0, "--out", root / "pre")
    _cli("finetune", "--task", "seg", "--init", root / "pre" / "pretrain.isdt", "--data", data, "--epochs", 20,
         "--config", FINETUNE_CFG, "--seed", 0, "--out", root / "ft")
    _cli("eval", "--ckpt", root / "ft" / "finetune.isdt", "--report", root / "eval.csv", "--data", data)
    return {"root": root, "data": data, "wall": time.perf_counter() - start}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _epoch_means(curve: Path, steps_per_epoch: int) -> list[float]:
    totals = [float(r["total"]) for r in _read_csv(curve)]
    return [float(np.mean(totals[i : i + steps_per_epoch])) for i in range(0, len(totals), steps_per_epoch)]


@pytest.fixture(scope="module")
def smoke_dual(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("smoke_dual"), "dual")


@pytest.fixture(scope="module")
def smoke_dataset(smoke_dual):
    return load_dataset(smoke_dual["data"])


@pytest.fixture(scope="module")
def phantom_images(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    gen_phantoms(PhantomSpec(count=16, size=32, seed=2), out)
    return load_dataset(out).images


def test_criterion_6_end_to_end_smoke(smoke_dual, smoke_dataset):
    with criterion(6, "end-to-end smoke") as notes:
        run = smoke_dual
        train_n = len(smoke_dataset.subset("train"))
        steps = -(-train_n // RunConfig.for_phase("pretrain").train.batch_size)
        means = _epoch_means(run["root"] / "pre" / "pretrain_curve.csv", steps)
        assert len(means) == 10
        ratio = means[-1] / means[0]
        notes.append(f"L_total epoch1 {means[0]:.4f} -> epoch10 {means[-1]:.4f} (ratio {ratio:.3f})")
        rows = _read_csv(run["root"] / "eval.csv")
        mean_dice = float(np.mean([float(r["dice"]) for r in rows]))
        notes.append(f"test Dice {mean_dice:.3f} on {len(rows)} held-out phantoms")
        notes.append(f"wall {run['wall']:.0f}s")
        assert ratio < LOSS_RATIO_THRESHOLD, f"loss ratio {ratio:.3f} >= {LOSS_RATIO_THRESHOLD}"
        assert mean_dice >= DICE_THRESHOLD, f"test Dice {mean_dice:.3f} < {DICE_THRESHOLD}"
        assert run["wall"] < WALL_LIMIT_S, f"pipeline wall time {run['wall']:.0f}s"


def _dice_hd(path: Path) -> tuple[list[dict], str]:
    rows = _read_csv(path)
    hds = [float(r["hausdorff"]) for r in rows if r["hausdorff"] != "nan"]
    hd = np.mean(hds) if hds else float("nan")
    return rows, f"Dice {np.mean([float(r['dice']) for r in rows]):.3f} HD {hd:.2f}"


def test_criterion_7_ablation_parity(smoke_dual, tmp_path_factory):
    with criterion(7, "ablation harness parity") as notes:
        dual_rows, summary = _dice_hd(smoke_dual["root"] / "eval.csv")
        header = (smoke_dual["root"] / "eval.csv").read_text().splitlines()[0]
        notes.append(f"dual {summary}")
        for mode in ("intensity_only", "spatial_only"):
            run = _run_pipeline(tmp_path_factory.mktemp(f"smoke_{mode}"), mode)
            meta = load_checkpoint(run["root"] / "pre" / "pretrain.isdt").metadata
            assert meta["mask_mode"] == mode
            rows, summary = _dice_hd(run["root"] / "eval.csv")
            assert (run["root"] / "eval.csv").read_text().splitlines()[0] == header
            assert [r["sample_id"] for r in rows] == [r["sample_id"] for r in dual_rows]
            notes.append(f"{mode} {summary}")


def test_criterion_8_determinism(smoke_dual, tmp_path_factory):
    with criterion(8, "determinism") as notes:
        again = _run_pipeline(tmp_path_factory.mktemp("smoke_again"), "dual")
        a, b = smoke_dual["root"], again["root"]
        artifacts = ["pre/pretrain.isdt", "pre/pretrain_curve.csv", "ft/finetune.isdt",
                     "ft/finetune_curve.csv", "ft/finetune_report.csv", "eval.csv"]
        for rel in artifacts:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs between identical runs"
        notes.append(f"{len(artifacts)} artifacts bit-identical across two runs")

        cut = tmp_path_factory.mktemp("interrupted")
        ds = load_dataset(smoke_dual["data"])
        run_pretrain(ds, cut, RunConfig.for_phase("pretrain"), seed=0, stop_after_epoch=5)
        _cli("pretrain", "--data", smoke_dual["data"], "--epochs", 10, "--resume", cut / "pretrain.isdt",
             "--seed", 0, "--out", cut)
        for rel in ("pretrain.isdt", "pretrain_curve.csv"):
            assert (cut / rel).read_bytes() == (a / "pre" / rel).read_bytes(), f"resumed {rel} differs"
        assert load_checkpoint(cut / "pretrain.isdt").global_step == load_checkpoint(a / "pre" / "pretrain.isdt").global_step
        notes.append("stop at epoch 5 + resume == uninterrupted (checkpoint and curve)")
