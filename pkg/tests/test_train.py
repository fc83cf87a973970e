"""Training loop contracts: determinism, checkpoint round trips, resume
equivalence, freeze behavior, EMA closed form.  Uses a tiny schedule."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from mvdistill import tensor as T
from mvdistill.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from mvdistill.config import RunConfig, preset
from mvdistill.errors import ConfigError, FormatError
from mvdistill.ingest import save_study, write_manifest
from mvdistill.objective import dino_loss, ema_update, make_pairing, teacher_targets
from mvdistill.synthetic import GeneratorConfig, generate_study
from mvdistill.tensor import Tensor
from mvdistill.train import (
    FROZEN_FINAL,
    init_train_state,
    prepare_studies,
    pretrain,
    train_step,
)


def tiny_config(steps=6, **over) -> RunConfig:
    cfg = preset("desk")
    sched = dataclasses.replace(cfg.schedule, total_steps=steps,
                                warmup_steps=max(1, steps // 6),
                                constant_steps=max(1, steps // 4))
    train = dataclasses.replace(cfg.train, checkpoint_interval=over.pop("interval", 3))
    return dataclasses.replace(cfg, schedule=sched, train=train, **over)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = GeneratorConfig()
    records = []
    for seed in range(12):
        records += save_study(generate_study(seed, cfg), root / "images")
    write_manifest(records, root / "manifest.jsonl")
    return records, root


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7),
        }
        save_checkpoint(tmp_path / "ck", 5, {"x": 1}, tensors)
        back = load_checkpoint(tmp_path / "ck")
        assert back.step == 5
        assert back.config == {"x": 1}
        for k, v in tensors.items():
            assert np.array_equal(back.tensors[k], v)
            assert back.tensors[k].dtype == v.dtype

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"w": rng.standard_normal((5, 5)).astype(np.float32)}
        save_checkpoint(tmp_path / "c1", 2, {"s": 3}, tensors)
        back = load_checkpoint(tmp_path / "c1")
        save_checkpoint(tmp_path / "c2", back.step, back.config, back.tensors)
        for name in ("meta.json", "w.bin"):
            assert (tmp_path / "c1" / name).read_bytes() == \
                (tmp_path / "c2" / name).read_bytes()

    def test_tampered_size_fails_naming_file(self, tmp_path):
        save_checkpoint(tmp_path / "ck", 0, {},
                        {"w": np.zeros(4, dtype=np.float32)})
        p = tmp_path / "ck" / "w.bin"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError) as err:
            load_checkpoint(tmp_path / "ck")
        assert "w.bin" in str(err.value)

    def test_version_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "ck", 0, {},
                        {"w": np.zeros(2, dtype=np.float32)})
        meta = (tmp_path / "ck" / "meta.json")
        meta.write_text(meta.read_text().replace(
            f'"format_version": {FORMAT_VERSION}', '"format_version": 999'))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_tensor_file(self, tmp_path):
        save_checkpoint(tmp_path / "ck", 0, {},
                        {"w": np.zeros(2, dtype=np.float32)})
        (tmp_path / "ck" / "w.bin").unlink()
        with pytest.raises(FormatError) as err:
            load_checkpoint(tmp_path / "ck")
        assert "w.bin" in str(err.value)


class TestTrainStep:
    def test_loss_matches_per_sample_dino_loss(self, dataset):
        records, root = dataset
        cfg = tiny_config()
        studies = prepare_studies(records, root, "multi")
        from mvdistill.objective import project, teacher_temp_at
        from mvdistill.seeding import TAG_DROPPATH, rng_from
        from mvdistill.train import _collect_batches

        state = init_train_state(cfg, "multi")
        step = 0
        batches = _collect_batches(studies, cfg, "multi", step, 1)
        b, g_per, l_per = len(batches), 2, 10
        g = np.stack([c.image for cb in batches for c in cb.crops[:2]])
        l = np.stack([c.image for cb in batches for c in cb.crops[2:]])
        cls_g, _, _ = state.student_enc_model.forward_batch(
            g, training=True, rng=rng_from(cfg.seed, TAG_DROPPATH, step, 0))
        cls_l, _, _ = state.student_enc_model.forward_batch(
            l, training=True, rng=rng_from(cfg.seed, TAG_DROPPATH, step, 1))
        sl = T.concat([project(cls_g, state.student_head),
                       project(cls_l, state.student_head)], axis=0)
        state.distill.teacher_temp = teacher_temp_at(
            step, cfg.schedule.total_steps, cfg.distill)
        per_sample = []
        for i, cb in enumerate(batches):
            t_imgs = np.stack([g[i * 2 + c] for c in cb.teacher_indices])
            with T.no_grad():
                tcls, _, _ = state.teacher_enc_model.forward_batch(t_imgs)
                tlog = project(tcls, state.teacher_head).data
            probs = teacher_targets(tlog, state.distill)
            rows = [i * 2 + c for c in range(2)] + \
                   [b * 2 + i * 10 + c for c in range(10)]
            pairs = []
            for t_row, c in enumerate(cb.teacher_indices):
                pairs += [(t_row, s) for _, s in make_pairing([c], 12)]
            per_sample.append(dino_loss(probs, sl[rows],
                                        cfg.distill.student_temp, pairs).item())
        expected = float(np.mean(per_sample))

        state2 = init_train_state(cfg, "multi")
        _, loss, _, _ = train_step(state2, studies, step)
        assert loss == pytest.approx(expected, abs=3e-6)

    def test_frozen_prototypes_bit_identical(self, dataset):
        records, root = dataset
        cfg = tiny_config()  # step 0 < warmup -> frozen
        studies = prepare_studies(records, root, "multi")
        state = init_train_state(cfg, "multi")
        before = state.student["head.prototypes"].data.copy()
        train_step(state, studies, 0)
        assert np.array_equal(state.student["head.prototypes"].data, before)
        # after warmup the layer trains
        for step in range(1, 3):
            train_step(state, studies, step)
        assert not np.array_equal(state.student["head.prototypes"].data, before)

    def test_teacher_follows_ema_closed_form(self):
        # 1-parameter model: teacher after n steps equals the closed-form
        # EMA of the recorded student trajectory, to 1e-10
        rng = np.random.default_rng(3)
        lam = 0.97
        teacher = {"w": Tensor(np.array([0.5]), dtype=np.float64)}
        student_values = rng.standard_normal(40)
        expected = 0.5
        for sv in student_values:
            ema_update(teacher, {"w": Tensor(np.array([sv]), dtype=np.float64)},
                       lam)
            expected = lam * expected + (1 - lam) * sv
        assert teacher["w"].data[0] == pytest.approx(expected, abs=1e-10)

    def test_single_mode_runs(self, dataset):
        records, root = dataset
        cfg = tiny_config(steps=2)
        studies = prepare_studies(records, root, "single")
        state = init_train_state(cfg, "single")
        lr, loss, ent, mom = train_step(state, studies, 0)
        assert np.isfinite(loss)

    def test_mode_validation(self):
        with pytest.raises(ConfigError):
            init_train_state(tiny_config(), "both")


class TestPretrain:
    def test_two_runs_bit_identical_and_workers_invariant(self, dataset, tmp_path):
        records, root = dataset
        cfg = tiny_config(steps=4)
        pretrain(records, root, cfg, "multi", tmp_path / "r1", workers=1)
        pretrain(records, root, cfg, "multi", tmp_path / "r2", workers=1)
        pretrain(records, root, cfg, "multi", tmp_path / "r4", workers=4)
        log1 = (tmp_path / "r1" / "loss.csv").read_bytes()
        assert log1 == (tmp_path / "r2" / "loss.csv").read_bytes()
        assert log1 == (tmp_path / "r4" / "loss.csv").read_bytes()

    def test_single_mode_same_log_format(self, dataset, tmp_path):
        records, root = dataset
        cfg = tiny_config(steps=2)
        pretrain(records, root, cfg, "single", tmp_path / "s", workers=1)
        lines = (tmp_path / "s" / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss,teacher_entropy,ema_momentum"
        assert len(lines) == 3
        for line in lines[1:]:
            vals = line.split(",")
            assert len(vals) == 5
            assert all(np.isfinite(float(v)) for v in vals[1:])

    def test_resume_equivalence_bit_identical(self, dataset, tmp_path):
        records, root = dataset
        cfg = tiny_config(steps=6, interval=3)
        pretrain(records, root, cfg, "multi", tmp_path / "full", workers=1)
        full_log = (tmp_path / "full" / "loss.csv").read_text().splitlines()

        # resume from the periodic step-3 checkpoint of the full run
        ck3 = tmp_path / "full" / "ckpt-00000003"
        assert ck3.is_dir()
        pretrain(records, root, cfg, "multi", tmp_path / "resumed", workers=1,
                 resume_from=ck3)
        resumed_log = (tmp_path / "resumed" / "loss.csv").read_text().splitlines()
        assert resumed_log[0] == full_log[0]
        assert resumed_log[1:] == full_log[4:]  # steps 3..5 bit-identical

        ck_final_full = load_checkpoint(tmp_path / "full" / "ckpt-final")
        ck_final_res = load_checkpoint(tmp_path / "resumed" / "ckpt-final")
        for name in ck_final_full.tensors:
            assert np.array_equal(ck_final_full.tensors[name],
                                  ck_final_res.tensors[name]), name

    def test_checkpoint_mode_mismatch_rejected(self, dataset, tmp_path):
        records, root = dataset
        cfg = tiny_config(steps=4, interval=2)
        pretrain(records, root, cfg, "multi", tmp_path / "m", workers=1)
        with pytest.raises(ConfigError):
            pretrain(records, root, cfg, "single", tmp_path / "s", workers=1,
                     resume_from=tmp_path / "m" / "ckpt-00000002")
