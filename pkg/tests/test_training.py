import math

import numpy as np
import pytest

from kaseg import checkpoint as ckpt
from kaseg import data as D
from kaseg import training as T
from kaseg.config import parse_config


def config(root, *extra):
    return parse_config(None, [
        f"data.root={root}", "data.num_train=16", "data.num_val=4", "data.image_size=32",
        "teacher.iterations=6", "student.iterations=6", "translator.batch_size=4",
        "run.eval_every=3", "run.checkpoint_every=2", *extra,
    ])


@pytest.fixture(scope="module")
def stage_dirs(tmp_path_factory):
    """Dataset plus teacher and translator checkpoints shared by the tests below."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = config(root / "data")
    D.generate(cfg.dataset_spec(), cfg.data.root)
    teacher = T.train_teacher(cfg, root / "teacher")
    ae = T.train_autoencoder(cfg, teacher.checkpoint, root / "ae")
    return root, teacher.checkpoint, ae.checkpoint


def test_teacher_beats_uniform_after_200_iterations(tmp_path, stage_dirs):
    root, _, _ = stage_dirs
    cfg = config(root / "data", "teacher.iterations=200", "run.eval_every=0",
                 "run.checkpoint_every=0")
    result = T.train_teacher(cfg, tmp_path / "t")
    rows = [r for r in T.read_metrics(result.metrics) if "ce" in r]
    assert len(rows) == 200
    tail = np.mean([r["ce"] for r in rows[-20:]])
    assert tail < math.log(4)


def test_run_directory_contents(stage_dirs):
    root, teacher, _ = stage_dirs
    run = teacher.parent
    assert {p.name for p in run.iterdir()} == {"config.txt", "metrics.log", "last.ckpt", "final.ckpt"}
    assert "distill.beta = 50.0" in (run / "config.txt").read_text()
    lines = (run / "metrics.log").read_text().splitlines()
    assert lines[0].startswith("iter=1 lr=0.05 ce=")
    assert lines[0].split()[-1].startswith("total=")
    assert [l.split()[0] for l in lines if "val_miou" in l] == ["iter=3", "iter=6"]


def test_poly_schedule_in_log(stage_dirs):
    _, teacher, _ = stage_dirs
    rows = [r for r in T.read_metrics(teacher.parent / "metrics.log") if "lr" in r]
    lrs = [r["lr"] for r in rows]
    assert lrs[0] == 0.05
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_teacher_is_deterministic(tmp_path, stage_dirs):
    root, teacher, _ = stage_dirs
    again = T.train_teacher(config(root / "data"), tmp_path / "t")
    assert again.checkpoint.read_bytes() == teacher.read_bytes()
    assert again.metrics.read_bytes() == (teacher.parent / "metrics.log").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, stage_dirs):
    root, teacher, ae = stage_dirs
    cfg = config(root / "data")
    full = T.distill_student(cfg, teacher, ae, tmp_path / "full")
    part = T.distill_student(cfg, teacher, ae, tmp_path / "part", stop_at=3)
    assert not part.checkpoint.exists()
    # leftover lines past the checkpoint must be discarded on resume
    with open(part.metrics, "a") as fh:
        fh.write("iter=4 lr=0 ce=0 adapt=0 aff=0 total=0\n")
    resumed = T.distill_student(cfg, teacher, ae, tmp_path / "part")
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()
    assert resumed.metrics.read_bytes() == full.metrics.read_bytes()


def test_resume_refuses_other_config(tmp_path, stage_dirs):
    root, teacher, ae = stage_dirs
    T.distill_student(config(root / "data"), teacher, ae, tmp_path / "s", stop_at=2)
    with pytest.raises(ckpt.ConfigMismatchError):
        T.distill_student(config(root / "data", "distill.beta=1"), teacher, ae, tmp_path / "s")


def test_teacher_and_encoder_frozen(tmp_path, stage_dirs):
    root, teacher_path, ae_path = stage_dirs
    cfg = config(root / "data")
    teacher = T.load_teacher(cfg, teacher_path)
    before = ckpt.checksum(teacher)
    result = T.distill_student(cfg, teacher_path, ae_path, tmp_path / "s")
    c = ckpt.load(result.checkpoint)
    assert not any(k.startswith(("param.teacher", "param.translator")) for k in c.tensors)
    assert ckpt.checksum(T.load_teacher(cfg, teacher_path)) == before


def test_frozen_change_is_detected(tmp_path, stage_dirs, monkeypatch):
    root, teacher, ae = stage_dirs
    real = T.load_translator

    def tampering(cfg, path):
        net = real(cfg, path)
        original = net.encode

        def encode(x):
            next(iter(net.named_parameters().values())).data.flat[0] += 1.0
            return original(x)

        net.encode = encode
        return net

    monkeypatch.setattr(T, "load_translator", tampering)
    with pytest.raises(T.FrozenParameterError, match="translator"):
        T.distill_student(config(root / "data"), teacher, ae, tmp_path / "s")


def test_zero_weights_equal_plain(tmp_path, stage_dirs):
    root, teacher, ae = stage_dirs
    cfg = config(root / "data", "distill.beta=0", "distill.gamma=0")
    zero = ckpt.load(T.distill_student(cfg, teacher, ae, tmp_path / "z").checkpoint)
    plain = ckpt.load(T.run_baseline(cfg, "plain", run_dir=tmp_path / "p").checkpoint)
    student = {k: v for k, v in plain.tensors.items() if ".student." in k or k.startswith("meta")}
    assert student
    for k, v in student.items():
        assert zero.tensors[k].tobytes() == v.tobytes(), k


def test_affinity_only_equals_distill_with_zero_beta(tmp_path, stage_dirs):
    root, teacher, ae = stage_dirs
    a = T.run_baseline(config(root / "data"), "affinity_only", teacher, ae, tmp_path / "a")
    b = T.distill_student(config(root / "data", "distill.beta=0"), teacher, ae, tmp_path / "b")
    ca, cb = ckpt.load(a.checkpoint), ckpt.load(b.checkpoint)
    assert all(ca.tensors[k].tobytes() == cb.tensors[k].tobytes() for k in ca.tensors)
    assert a.metrics.read_bytes() == b.metrics.read_bytes()


@pytest.mark.parametrize("mode", ["kd", "fitnet"])
def test_baselines_train(tmp_path, stage_dirs, mode):
    root, teacher, _ = stage_dirs
    result = T.run_baseline(config(root / "data"), mode, teacher, None, tmp_path / mode)
    rows = T.read_metrics(result.metrics)
    assert mode in rows[0]
    assert 0 <= result.val_miou <= 1


def test_distill_logs_all_components(stage_dirs, tmp_path):
    root, teacher, ae = stage_dirs
    result = T.distill_student(config(root / "data"), teacher, ae, tmp_path / "s")
    first = T.read_metrics(result.metrics)[0]
    assert set(first) == {"iter", "lr", "ce", "adapt", "aff", "total"}
    assert first["total"] == pytest.approx(first["ce"] + 50 * first["adapt"] + first["aff"], rel=1e-5)


def test_autoencoder_log_and_probe(stage_dirs):
    _, _, ae = stage_dirs
    rows = T.read_metrics(ae.parent / "metrics.log")
    assert "probe_mse" in rows[0] and rows[0]["iter"] == 0
    assert "probe_mse" in rows[-1] and rows[-1]["iter"] == T.translator_iterations(
        config("x"))


def test_missing_prerequisites(tmp_path, stage_dirs):
    root, teacher, _ = stage_dirs
    cfg = config(root / "data")
    with pytest.raises(T.MissingArtifactError):
        T.train_autoencoder(cfg, tmp_path / "absent.ckpt", tmp_path / "ae")
    with pytest.raises(T.MissingArtifactError):
        T.distill_student(cfg, teacher, tmp_path / "absent.ckpt", tmp_path / "s")
    with pytest.raises(FileNotFoundError):
        T.train_teacher(config(tmp_path / "nodata"), tmp_path / "t")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(tmp_path, stage_dirs):
    root, _, _ = stage_dirs
    cfg = config(root / "data", "teacher.lr=1e30")
    with pytest.raises(T.TrainingError, match="non-finite|teacher iteration"):
        T.train_teacher(cfg, tmp_path / "t")


def test_wrong_checkpoint_kind(stage_dirs):
    root, teacher, ae = stage_dirs
    with pytest.raises(ckpt.CheckpointError):
        T.load_segmenter(ae)
    with pytest.raises(ckpt.CheckpointError):
        T.load_teacher(config(root / "data", "teacher.output_stride=16"), teacher)
    assert T.load_segmenter(teacher).num_classes == 4
