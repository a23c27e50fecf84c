import dataclasses

import pytest
import torch

from edge_lbam.inpaint import InpaintUNet, UNetConfig
from edge_lbam.mecnet import MECNet, MECNetConfig
from edge_lbam.train import (
    ADAM_BETA2,
    CHECKPOINT_VERSION,
    INPAINT_LOG_COLUMNS,
    MECNET_LOG_COLUMNS,
    STAGE_DEFAULTS,
    LossLog,
    TrainConfig,
    epoch_indices,
    finetune_joint,
    inpaint_from_checkpoint,
    load_checkpoint,
    mecnet_from_checkpoint,
    read_loss_log,
    step_seed,
    steps_per_epoch,
    train_inpaint,
    train_mecnet,
    write_checkpoint,
)


class TestTrainConfig:
    def test_stage_defaults(self):
        for stage, (lr, beta1, epochs) in STAGE_DEFAULTS.items():
            cfg = TrainConfig(stage=stage)
            assert cfg.resolved_lr() == lr
            assert cfg.betas() == (beta1, ADAM_BETA2)
            assert cfg.resolved_epochs() == epochs

    def test_explicit_fields_win(self):
        cfg = TrainConfig(stage="mecnet", lr=3e-4, adam_beta1=0.7, epochs=2)
        assert cfg.resolved_lr() == 3e-4
        assert cfg.betas() == (0.7, ADAM_BETA2)
        assert cfg.resolved_epochs() == 2

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError, match="stage"):
            TrainConfig(stage="pretrain")

    def test_overfit_reshapes_objective_and_rate(self):
        cfg = TrainConfig(stage="inpaint", overfit=True)
        w = cfg.loss_weights()
        assert (w.lambda2, w.lambda3, w.lambda4) == (0.0, 0.0, 0.0)
        assert w.lambda1 == 1.0
        assert cfg.resolved_lr() == 1e-3
        assert TrainConfig(stage="inpaint", overfit=True, lr=5e-4).resolved_lr() == 5e-4

    def test_iterations_override_epochs(self):
        cfg = TrainConfig(stage="inpaint", iterations=7)
        assert cfg.total_steps(100) == 7
        cfg = TrainConfig(stage="inpaint", epochs=3, batch_size=4)
        assert cfg.total_steps(10) == 3 * 2

    def test_desk_profiles(self):
        cfg = TrainConfig(stage="inpaint", desk_scale=True)
        assert cfg.unet_config().channels == (16, 32, 64, 128, 128)
        assert cfg.resolved_size() == 64
        mc = TrainConfig(stage="mecnet", desk_scale=True).mecnet_config()
        assert mc.scales == (2, 4, 8, 16)


class TestSampling:
    def test_epoch_indices_pure(self):
        a = epoch_indices(10, 4, seed=3, tag="t", step=5)
        b = epoch_indices(10, 4, seed=3, tag="t", step=5)
        assert a == b

    def test_epoch_slices_partition_the_permutation(self):
        per = steps_per_epoch(8, 4)
        assert per == 2
        _, first = epoch_indices(8, 4, seed=0, tag="x", step=0)
        _, second = epoch_indices(8, 4, seed=0, tag="x", step=1)
        assert sorted(first + second) == list(range(8))

    def test_small_dataset_shrinks_batch(self):
        epoch, idx = epoch_indices(3, 8, seed=0, tag="x", step=4)
        assert epoch == 4
        assert sorted(idx) == [0, 1, 2]

    def test_step_seed_distinct(self):
        keys = {step_seed(0, tag, step)
                for tag in ("a", "b") for step in range(50)}
        assert len(keys) == 100


class TestLossLog:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "log.csv"
        with LossLog(path, ("step", "l1")) as log:
            log.append({"step": 1, "l1": 0.25})
            log.append({"step": 2, "l1": torch.tensor(0.125)})
        rows = read_loss_log(path)
        assert rows == [{"step": 1, "l1": 0.25}, {"step": 2, "l1": 0.125}]

    def test_missing_column_rejected(self, tmp_path):
        with LossLog(tmp_path / "log.csv", ("step", "l1")) as log:
            with pytest.raises(ValueError, match="l1"):
                log.append({"step": 1})

    def test_reopen_appends_without_second_header(self, tmp_path):
        path = tmp_path / "log.csv"
        with LossLog(path, ("step", "l1")) as log:
            log.append({"step": 1, "l1": 1.0})
        with LossLog(path, ("step", "l1")) as log:
            log.append({"step": 2, "l1": 2.0})
        assert [r["step"] for r in read_loss_log(path)] == [1, 2]


class TestCheckpoints:
    def test_version_mismatch_rejected(self, tmp_path):
        path = write_checkpoint(tmp_path / "c.pt",
                                {"version": CHECKPOINT_VERSION + 1, "kind": "mecnet"})
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_kind_mismatch_rejected(self, tmp_path):
        path = write_checkpoint(tmp_path / "c.pt",
                                {"version": CHECKPOINT_VERSION, "kind": "mecnet"})
        with pytest.raises(ValueError, match="mecnet"):
            load_checkpoint(path, expect_kind="inpaint")

    def test_mecnet_roundtrip_bitwise(self, tmp_path):
        torch.manual_seed(0)
        model = MECNet(MECNetConfig.desk())
        payload = {
            "version": CHECKPOINT_VERSION, "kind": "mecnet",
            "arch": dataclasses.asdict(model.config),
            "model": model.state_dict(), "step": 0,
        }
        path = write_checkpoint(tmp_path / "m.pt", payload)
        clone, _ = mecnet_from_checkpoint(path)
        image = torch.rand(1, 3, 64, 64)
        mask = (torch.rand(1, 1, 64, 64) > 0.3).float()
        edges = (torch.rand(1, 1, 64, 64) > 0.9).float()
        model.eval()
        with torch.no_grad():
            a = model(image, mask, edges).edges
            b = clone(image, mask, edges).edges
        assert torch.equal(a, b)

    def test_inpaint_roundtrip_bitwise(self, tmp_path):
        torch.manual_seed(0)
        model = InpaintUNet(UNetConfig.desk("Edge-LBAM"))
        payload = {
            "version": CHECKPOINT_VERSION, "kind": "inpaint",
            "arch": dataclasses.asdict(model.config),
            "model": model.state_dict(), "step": 0,
        }
        path = write_checkpoint(tmp_path / "i.pt", payload)
        clone, _ = inpaint_from_checkpoint(path)
        image = torch.rand(1, 3, 64, 64)
        mask = (torch.rand(1, 1, 64, 64) > 0.3).float()
        edges = (torch.rand(1, 1, 64, 64) > 0.9).float()
        model.eval()
        with torch.no_grad():
            a = model(image, mask, edges).composited
            b = clone(image, mask, edges).composited
        assert torch.equal(a, b)


def _mecnet_cfg(**kw):
    base = dict(stage="mecnet", desk_scale=True, batch_size=4, seed=11)
    base.update(kw)
    return TrainConfig(**base)


def _inpaint_cfg(**kw):
    base = dict(stage="inpaint", desk_scale=True, batch_size=4, seed=11)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainMECNet:
    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "m.txt"
        manifest.write_text("")
        with pytest.raises(ValueError, match="no images"):
            train_mecnet(_mecnet_cfg(iterations=1), manifest, tmp_path / "run")

    def test_wrong_stage_rejected(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        with pytest.raises(ValueError, match="stage"):
            train_mecnet(_inpaint_cfg(iterations=1), manifest, tmp_path)

    def test_short_run_logs_and_checkpoints(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        run = tmp_path / "run"
        final = train_mecnet(_mecnet_cfg(iterations=3), manifest, run)
        rows = read_loss_log(run / "loss_mecnet.csv")
        assert [r["step"] for r in rows] == [1, 2, 3]
        for row in rows:
            for col in MECNET_LOG_COLUMNS:
                assert row[col] == row[col]  # not NaN
        model, payload = mecnet_from_checkpoint(final)
        assert payload["step"] == 3
        assert payload["train"]["seed"] == 11

    def test_resume_matches_straight_run(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        straight = tmp_path / "straight"
        train_mecnet(_mecnet_cfg(iterations=4, checkpoint_every=2),
                     manifest, straight)
        resumed = tmp_path / "resumed"
        train_mecnet(_mecnet_cfg(iterations=4), manifest, resumed,
                     resume=straight / "mecnet_000002.pt")
        full = {r["step"]: r for r in read_loss_log(straight / "loss_mecnet.csv")}
        tail = read_loss_log(resumed / "loss_mecnet.csv")
        assert [r["step"] for r in tail] == [3, 4]
        for row in tail:
            for col in MECNET_LOG_COLUMNS:
                assert row[col] == pytest.approx(full[row["step"]][col], abs=1e-6)


class TestTrainInpaint:
    def test_seeded_runs_identical_logs(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        logs = []
        for name in ("a", "b"):
            run = tmp_path / name
            train_inpaint(_inpaint_cfg(iterations=4), manifest, run)
            logs.append(read_loss_log(run / "loss_inpaint.csv"))
        assert len(logs[0]) == 4
        for ra, rb in zip(*logs):
            for col in INPAINT_LOG_COLUMNS:
                assert ra[col] == pytest.approx(rb[col], abs=1e-6)

    def test_bf_trains_without_edge_input(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        run = tmp_path / "run"
        train_inpaint(_inpaint_cfg(iterations=2, variant="BF"), manifest, run,
                      edge_source=None)
        assert len(read_loss_log(run / "loss_inpaint.csv")) == 2

    def test_edge_variant_requires_edge_source(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        with pytest.raises(ValueError, match="edge source"):
            train_inpaint(_inpaint_cfg(iterations=1), manifest, tmp_path,
                          edge_source=None)

    def test_checkpoint_source_requires_checkpoint(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        with pytest.raises(ValueError, match="checkpoint"):
            train_inpaint(_inpaint_cfg(iterations=1), manifest, tmp_path,
                          edge_source="mecnet_checkpoint")

    def test_predicted_edges_leave_edge_net_frozen(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        mecnet_run = tmp_path / "m"
        mecnet_ckpt = train_mecnet(_mecnet_cfg(iterations=2), manifest, mecnet_run)
        before = load_checkpoint(mecnet_ckpt)["model"]
        run = tmp_path / "i"
        train_inpaint(_inpaint_cfg(iterations=2), manifest, run,
                      edge_source="mecnet_checkpoint",
                      mecnet_checkpoint=mecnet_ckpt)
        after = load_checkpoint(mecnet_ckpt)["model"]
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert len(read_loss_log(run / "loss_inpaint.csv")) == 2

    def test_overfit_drops_gan_terms_and_descends(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        run = tmp_path / "run"
        train_inpaint(_inpaint_cfg(iterations=30, overfit=True, batch_size=8),
                      manifest, run)
        rows = read_loss_log(run / "loss_inpaint.csv")
        for row in rows:
            assert row["adv"] == 0.0 and row["disc"] == 0.0 and row["gp"] == 0.0
        tail = sum(r["l1"] for r in rows[-5:]) / 5
        assert tail < rows[0]["l1"]

    def test_resume_matches_straight_run(self, desk_corpus, tmp_path):
        manifest, _ = desk_corpus
        straight = tmp_path / "straight"
        train_inpaint(_inpaint_cfg(iterations=4, checkpoint_every=2),
                      manifest, straight)
        resumed = tmp_path / "resumed"
        train_inpaint(_inpaint_cfg(iterations=4), manifest, resumed,
                      resume=straight / "inpaint_000002.pt")
        full = {r["step"]: r for r in read_loss_log(straight / "loss_inpaint.csv")}
        tail = read_loss_log(resumed / "loss_inpaint.csv")
        assert [r["step"] for r in tail] == [3, 4]
        for row in tail:
            for col in INPAINT_LOG_COLUMNS:
                assert row[col] == pytest.approx(full[row["step"]][col], abs=1e-6)


@pytest.fixture(scope="module")
def stage_checkpoints(desk_corpus, tmp_path_factory):
    """Short edge-stage and inpainting-stage checkpoints for joint tests."""
    manifest, _ = desk_corpus
    root = tmp_path_factory.mktemp("stages")
    mecnet_ckpt = train_mecnet(_mecnet_cfg(iterations=2), manifest, root / "m")
    inpaint_ckpt = train_inpaint(_inpaint_cfg(iterations=2), manifest, root / "i")
    return manifest, mecnet_ckpt, inpaint_ckpt


def _joint_cfg(**kw):
    base = dict(stage="joint", desk_scale=True, batch_size=4, seed=11)
    base.update(kw)
    return TrainConfig(**base)


class TestFinetuneJoint:
    def test_single_step_updates_edge_network(self, stage_checkpoints, tmp_path):
        manifest, mecnet_ckpt, inpaint_ckpt = stage_checkpoints
        run = tmp_path / "run"
        mecnet_final, inpaint_final = finetune_joint(
            mecnet_ckpt, inpaint_ckpt, _joint_cfg(iterations=1), manifest, run)
        before = load_checkpoint(mecnet_ckpt)["model"]
        after = load_checkpoint(mecnet_final, expect_kind="mecnet")["model"]
        delta = sum((after[k].float() - before[k].float()).norm() ** 2
                    for k in before if before[k].dtype.is_floating_point)
        assert float(delta) > 0.0
        assert load_checkpoint(inpaint_final)["kind"] == "inpaint"

    def test_edgeless_variant_rejected(self, desk_corpus, stage_checkpoints,
                                       tmp_path):
        manifest, mecnet_ckpt, _ = stage_checkpoints
        bf = train_inpaint(_inpaint_cfg(iterations=1, variant="BF"),
                           manifest, tmp_path / "bf", edge_source=None)
        with pytest.raises(ValueError, match="no edges"):
            finetune_joint(mecnet_ckpt, bf, _joint_cfg(iterations=1),
                           manifest, tmp_path / "run")

    def test_resume_reproduces_uninterrupted_run(self, stage_checkpoints,
                                                 tmp_path):
        manifest, mecnet_ckpt, inpaint_ckpt = stage_checkpoints
        straight = tmp_path / "straight"
        mecnet_a, inpaint_a = finetune_joint(
            mecnet_ckpt, inpaint_ckpt,
            _joint_cfg(iterations=4, checkpoint_every=2), manifest, straight)
        resumed = tmp_path / "resumed"
        mecnet_b, inpaint_b = finetune_joint(
            mecnet_ckpt, inpaint_ckpt, _joint_cfg(iterations=4),
            manifest, resumed, resume=straight / "joint_000002.pt")
        for a, b in ((mecnet_a, mecnet_b), (inpaint_a, inpaint_b)):
            sa = load_checkpoint(a)["model"]
            sb = load_checkpoint(b)["model"]
            assert all(torch.equal(sa[k], sb[k]) for k in sa)
        full = {r["step"]: r for r in read_loss_log(straight / "loss_joint.csv")}
        for row in read_loss_log(resumed / "loss_joint.csv"):
            for col in INPAINT_LOG_COLUMNS:
                assert row[col] == pytest.approx(full[row["step"]][col], abs=1e-6)
