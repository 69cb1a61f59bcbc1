"""Acceptance checks; each test records one PASS/FAIL line shown in the run summary."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from avdetect import attention, data, gradcheck, localize, model, trainer
from avdetect.data import SyntheticSpec
from avdetect.errors import FormatError
from avdetect.localize import Segment
from avdetect.metrics import ap_at_iou, ar_at_k, auc, eer
from avdetect.model import BatchOutput, ModelConfig, VideoTarget
from avdetect.tensor import Tensor

from oracles import brute_force_ap, brute_force_ar, random_instance, random_scored_set, ranking_auc, sweep_rates

DEFAULT_SPEC = SyntheticSpec()


@pytest.fixture(scope="module")
def default_splits():
    return data.synth_generate(DEFAULT_SPEC)


@pytest.fixture(scope="module")
def trained(default_splits):
    """MMMS-BA on V+L+A with default settings; shared by the detection and localization checks."""
    cfg = ModelConfig()
    start = time.perf_counter()
    res = trainer.train(cfg, default_splits["train"], default_splits["val"], trainer.TrainConfig(max_epochs=50))
    return cfg, res, time.perf_counter() - start


class TestGradients:
    def test_criterion_1(self, acceptance):
        results, seconds = gradcheck.run_suite()
        name, worst = max(results.items(), key=lambda kv: kv[1])
        ok = worst < gradcheck.RTOL and seconds < 120
        assert acceptance(1, "gradient suite", ok,
                          f"{len(results)} checks, worst {worst:.2e} ({name}), {seconds:.1f}s")


class TestAttentionInvariants:
    def test_criterion_2(self, acceptance):
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        stochastic = equivariant = symmetric = 0.0
        fixed_points = True
        for _ in range(200):
            n, d = int(rng.integers(1, 8)), int(rng.integers(1, 6))
            V, L, A = (rng.uniform(-3, 3, (n, d)) for _ in range(3))
            tr = attention.pair_attention(Tensor(V), Tensor(L))
            stochastic = max(stochastic, np.abs(tr.K1.data.sum(1) - 1).max(), np.abs(tr.K2.data.sum(1) - 1).max())
            perm = rng.permutation(n)
            for fuse in (attention.mmms_ba_fuse, attention.ms_sa_fuse, attention.mmus_sa_fuse):
                out = fuse(Tensor(V), Tensor(L), Tensor(A)).data
                moved = fuse(Tensor(V[perm]), Tensor(L[perm]), Tensor(A[perm])).data
                equivariant = max(equivariant, np.abs(moved - out[perm]).max())
            same = attention.pair_attention(Tensor(V), Tensor(V))
            symmetric = max(symmetric, np.abs(same.A1.data - same.A2.data).max())
            z = Tensor(np.zeros((n, d)))
            fixed_points &= not attention.mmms_ba_fuse(z, z, z).data.any()
            fixed_points &= not attention.ms_sa_block(z).data.any()
            fixed_points &= not attention.mmus_sa_fuse(z, z, z).data.any()
        seconds = time.perf_counter() - start
        ok = stochastic <= 1e-9 and equivariant == 0.0 and symmetric == 0.0 and fixed_points and seconds < 30
        assert acceptance(2, "attention invariants", ok,
                          f"row-sum error {stochastic:.1e}, permutation error {equivariant:.1e}, "
                          f"symmetry error {symmetric:.1e}, zero fixed points {fixed_points}, {seconds:.1f}s")


class TestLossClosedForms:
    def test_criterion_3(self, acceptance):
        focal = model.focal_loss(0.5, 1, alpha=1.0, gamma=2.0)
        diou = model.segment_reg_loss((0.0, 2.0), (1.0, 3.0), "diou")
        giou = model.segment_reg_loss((0.0, 2.0), (1.0, 3.0), "giou")

        cfg = ModelConfig(focal_alpha=1.0, focal_gamma=2.0, lambda_reg=1.0, reg_loss="diou")
        p = np.array([0.3, 0.7])
        out = BatchOutput(Tensor(np.c_[1 - p, p]), Tensor([[0.4, 0.6], [0.1, 0.9]]), 2, ["v"])
        got = model.combined_loss(out, VideoTarget(np.array([0, 1]), [(0.8, 2.0)], 1), cfg).item()
        ps, pe, gs, ge = 1.1, 1.9, 0.8, 2.0
        inter = min(pe, ge) - max(ps, gs)
        union = (pe - ps) + (ge - gs) - inter
        enclose = max(pe, ge) - min(ps, gs)
        reg = 1 - inter / union + (((ps + pe) - (gs + ge)) / 2) ** 2 / enclose ** 2
        expected = (-(0.3 ** 2) * math.log(0.7) * 2 + reg) / 1

        errors = [abs(focal - 0.25 * math.log(2)), abs(diou - 7 / 9), abs(giou - 2 / 3), abs(got - expected)]
        ok = max(errors) <= 1e-12
        assert acceptance(3, "loss closed forms", ok,
                          "errors focal {:.1e}, DIoU {:.1e}, GIoU {:.1e}, combined {:.1e}".format(*errors))


class TestMetricOracles:
    def test_criterion_4(self, acceptance):
        start = time.perf_counter()
        rng = np.random.default_rng(4)
        auc_err = max(abs(auc(s, y) - ranking_auc(s, y)) for s, y in (random_scored_set(rng) for _ in range(200)))

        loc_err, instances = 0.0, 0
        while instances < 200:
            preds, gts = random_instance(rng)
            if not any(gts.values()):
                continue
            instances += 1
            for t in (0.5, 0.75, 0.95):
                loc_err = max(loc_err, abs(ap_at_iou(preds, gts, t) - brute_force_ap(preds, gts, t)))
            for k in (1, 10):
                loc_err = max(loc_err, abs(ar_at_k(preds, gts, k) - brute_force_ar(preds, gts, k)))

        scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
        fpr, fnr = min(sweep_rates(scores, labels, 1e-4), key=lambda r: abs(r[0] - r[1]))
        eer_err = abs(eer(scores, labels) - (fpr + fnr) / 2)
        seconds = time.perf_counter() - start
        ok = auc_err <= 1e-9 and loc_err <= 1e-9 and eer_err <= 5e-4 and seconds < 60
        assert acceptance(4, "metric oracles", ok,
                          f"AUC {auc_err:.1e}, AP/AR {loc_err:.1e}, EER {eer_err:.1e}, {seconds:.1f}s")


@pytest.mark.slow
class TestEndToEnd:
    def test_criterion_5(self, acceptance, trained, default_splits):
        cfg, res, seconds = trained
        test_auc = trainer.validation_auc(res.params, cfg, default_splits["test"])
        ok = test_auc >= 0.95 and len(res.log) <= 50 and seconds < 15 * 60
        assert acceptance(5, "synthetic detection", ok,
                          f"test video AUC {test_auc:.4f} after {len(res.log)} epochs "
                          f"(best {res.best_epoch}), {seconds / 60:.1f} min")

    def test_criterion_6(self, acceptance, trained, default_splits):
        base_cfg, base_res, _ = trained
        rows = {("MMMS-BA", "V+L+A"): None, ("MS-SA", "V+L+A"): None,
                ("MMMS-BA", "V+L"): None, ("MMMS-BA", "V+A"): None, ("MMMS-BA", "L+A"): None}
        for variant, mods in rows:
            cfg = replace(base_cfg, variant=variant, modalities=mods)
            aucs = []
            for seed in (0, 1, 2):
                if (variant, mods, seed) == ("MMMS-BA", "V+L+A", 0):
                    params = base_res.params
                else:
                    params = trainer.train(cfg, default_splits["train"], default_splits["val"],
                                           trainer.TrainConfig(seed=seed)).params
                aucs.append(trainer.validation_auc(params, cfg, default_splits["test"]))
            rows[variant, mods] = float(np.mean(aucs))
        full = rows["MMMS-BA", "V+L+A"]
        checks = [full >= rows["MS-SA", "V+L+A"] - 0.01]
        checks += [full >= rows["MMMS-BA", m] - 0.01 for m in ("V+L", "V+A", "L+A")]
        detail = ", ".join(f"{v} {m} {a:.4f}" for (v, m), a in rows.items())
        assert acceptance(6, "ablation ordering (3-seed mean AUC)", all(checks), detail)

    def test_criterion_7(self, acceptance, trained, default_splits):
        cfg, res, _ = trained
        split = default_splits["test"]
        preds = model.predict(res.params, cfg, split.features)
        segs = {f.video_id: localize.localize_video(preds[f.video_id], f.seq_stride, f.video_duration)
                for f in split.features}
        gts = {r.video_id: list(r.segments) for r in split.labels}
        ap, ar = ap_at_iou(segs, gts, 0.5), ar_at_k(segs, gts, 10)
        nms = localize.soft_nms([Segment(0, 1, 0.9), Segment(0, 1, 0.8)], "gaussian", sigma=0.5)
        nms_err = abs(nms[1].score - 0.8 * math.exp(-2))
        ok = ap >= 0.90 and ar >= 0.85 and nms_err <= 1e-9
        assert acceptance(7, "localization", ok, f"AP@0.5 {ap:.4f}, AR@10 {ar:.4f}, Soft-NMS error {nms_err:.1e}")


class TestDeterminismAndFormats:
    def test_criterion_8(self, acceptance, tmp_path):
        spec = SyntheticSpec(n_videos=20, n_seq=6, d_v=5, d_l=4, d_a=3, max_segments=2)
        for name in ("a", "b"):
            data.write_dataset(tmp_path / name, data.synth_generate(spec))
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        same_data = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

        splits = data.synth_generate(spec)
        cfg = gradcheck.toy_config(d_v=5, d_l=4, d_a=3)
        runs = [trainer.train(cfg, splits["train"], splits["val"], trainer.TrainConfig(max_epochs=2, batch_size=4))
                for _ in range(2)]
        same_ckpt = model.checkpoint_bytes(cfg, runs[0].params) == model.checkpoint_bytes(cfg, runs[1].params)
        same_log = trainer.format_log(runs[0].log) == trainer.format_log(runs[1].log)

        fs = splits["train"].features[0]
        blob = data.feature_bytes(fs)
        back = data.features_from_bytes(blob)
        roundtrip = data.feature_bytes(back) == blob and np.array_equal(
            back.X_v, fs.X_v.astype(np.float32).astype(np.float64))

        ckpt = model.checkpoint_bytes(cfg, runs[0].params)
        rng = np.random.default_rng(8)
        crashes, silent = 0, 0
        cases = [(data.features_from_bytes, blob[:cut]) for cut in range(len(blob))]
        cases += [(model.checkpoint_from_bytes, ckpt[:cut]) for cut in range(0, len(ckpt), 7)]
        for raw, reader in ((blob, data.features_from_bytes), (ckpt, model.checkpoint_from_bytes)):
            for _ in range(200):
                broken = bytearray(raw)
                broken[int(rng.integers(0, 16))] ^= 0xFF
                cases.append((reader, bytes(broken)))
        for reader, payload in cases:
            try:
                reader(payload)
                silent += 1
            except FormatError:
                pass
            except Exception:  # noqa: BLE001 - any other exception is a crash
                crashes += 1
        ok = same_data and same_ckpt and same_log and roundtrip and crashes == 0 and silent == 0
        assert acceptance(8, "determinism and formats", ok,
                          f"dataset identical {same_data}, checkpoint identical {same_ckpt}, log identical "
                          f"{same_log}, MSQF roundtrip {roundtrip}, {len(cases)} damaged inputs: "
                          f"{crashes} crashes, {silent} accepted")
