"""Teacher training, translator pre-training and student distillation.

All three stages share one loop (:func:`_train_loop`): poly-decayed momentum
SGD, a metrics log with one line per iteration, periodic validation and
checkpoints that capture everything needed to resume bit-exactly.

Randomness is counter based.  The batch order depends on ``(seed, epoch)``
and the augmentation of step ``n`` on ``(seed, stage, n)``, so a checkpoint
only needs the iteration count and the sampler position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import data as D
from . import distill as KD
from . import functional as F
from .config import RunConfig
from .evalkit import evaluate
from .models import (
    TEACHER_CHANNELS,
    Adapter,
    Projection,
    SegNet,
    StudentNet,
    TeacherNet,
    TranslatorAE,
    check_alignment,
)
from .nn import Module
from .optim import SGD, poly_lr
from .tensor import NonFiniteError, Tensor, no_grad

STAGE_IDS = {"teacher": 1, "translator": 2, "student": 3}
ARCH_CODES = {"teacher": 0, "student": 1, "translator": 2}
MODES = ("distill", "plain", "affinity_only", "kd", "fitnet")
FINAL = "final.ckpt"
LAST = "last.ckpt"
METRICS = "metrics.log"


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite file from an earlier stage is absent."""


class FrozenParameterError(RuntimeError):
    """A network that must stay fixed was modified."""


@dataclass
class StageResult:
    run_dir: Path
    checkpoint: Path
    metrics: Path
    val_miou: Optional[float]


# ---------------------------------------------------------------------------
# helpers


def load_split(cfg: RunConfig, split: str) -> D.SegDataset:
    manifest = Path(cfg.data.root) / f"{split}.txt"
    if not manifest.exists():
        raise MissingArtifactError(f"dataset manifest {manifest} not found (run gen-data first)")
    dataset = D.load(manifest)
    if dataset.num_classes != cfg.data.num_classes:
        raise D.DataError(
            f"{manifest}: dataset has {dataset.num_classes} classes, config expects "
            f"{cfg.data.num_classes}"
        )
    return dataset


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _prefixed(modules: Mapping[str, Module]) -> dict[str, Tensor]:
    out = {}
    for prefix, mod in modules.items():
        out.update({f"{prefix}.{k}": v for k, v in mod.named_parameters().items()})
    return out


def _decay_names(modules: Mapping[str, Module]) -> set[str]:
    return {f"{prefix}.{k}" for prefix, mod in modules.items() for k in mod.decay_names()}


def _meta(arch: str, net: Module) -> dict[str, np.ndarray]:
    meta = {"meta.arch": ckpt.int_tensor(ARCH_CODES[arch])}
    if isinstance(net, SegNet):
        meta["meta.num_classes"] = ckpt.int_tensor(net.num_classes)
        meta["meta.output_stride"] = ckpt.int_tensor(net.output_stride)
    return meta


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} checkpoint {path} not found")
    return Path(path)


def load_teacher(cfg: RunConfig, path) -> TeacherNet:
    c = ckpt.load(_require(path, "teacher"))
    net = TeacherNet(cfg.data.num_classes, cfg.teacher.output_stride, seed=cfg.run.seed)
    _check_meta(c, path, "teacher", net)
    ckpt.load_module_state(net, c, "teacher")
    return net.eval()


def load_student(cfg: RunConfig, path) -> StudentNet:
    c = ckpt.load(_require(path, "student"))
    net = StudentNet(cfg.data.num_classes, cfg.student.output_stride, seed=cfg.run.seed)
    _check_meta(c, path, "student", net)
    ckpt.load_module_state(net, c, "student")
    return net.eval()


def load_translator(cfg: RunConfig, path) -> TranslatorAE:
    c = ckpt.load(_require(path, "translator"))
    ae = TranslatorAE(TEACHER_CHANNELS[-1], seed=cfg.run.seed)
    ckpt.load_module_state(ae, c, "translator")
    return ae.eval()


def load_segmenter(path, num_classes: int | None = None) -> SegNet:
    """Rebuild a teacher or student from its checkpoint metadata alone."""
    c = ckpt.load(_require(path, "network"))
    arch = {v: k for k, v in ARCH_CODES.items()}.get(c.scalar("meta.arch"))
    if arch not in ("teacher", "student"):
        raise ckpt.CheckpointError(f"{path}: not a segmentation network checkpoint")
    k = c.scalar("meta.num_classes")
    if num_classes is not None and k != num_classes:
        raise ValueError(f"{path}: network has {k} classes, dataset has {num_classes}")
    cls = TeacherNet if arch == "teacher" else StudentNet
    net = cls(k, c.scalar("meta.output_stride"))
    ckpt.load_module_state(net, c, arch)
    return net.eval()


def _check_meta(c: ckpt.Checkpoint, path, arch: str, net: SegNet) -> None:
    if c.scalar("meta.arch") != ARCH_CODES[arch]:
        raise ckpt.CheckpointError(f"{path}: not a {arch} checkpoint")
    saved = (c.scalar("meta.num_classes"), c.scalar("meta.output_stride"))
    if saved != (net.num_classes, net.output_stride):
        raise ckpt.CheckpointError(
            f"{path}: saved (classes, output stride) {saved} differ from config "
            f"{(net.num_classes, net.output_stride)}"
        )


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop log lines recorded after ``iteration`` (left over from an interruption)."""
    if not path.exists():
        return
    kept = []
    for line in path.read_text().splitlines(keepends=True):
        head = line.split(" ", 1)[0]
        if head.startswith("iter=") and int(head[5:]) > iteration:
            break
        kept.append(line)
    path.write_text("".join(kept))


# ---------------------------------------------------------------------------
# the shared loop

StepFn = Callable[[np.ndarray, np.ndarray], "tuple[Tensor, dict[str, float]]"]


def _train_loop(
    *,
    stage: str,
    cfg: RunConfig,
    run_dir: Path,
    trainable: Mapping[str, Module],
    frozen: Mapping[str, Module],
    schedule,
    iterations: int,
    dataset: D.SegDataset,
    step: StepFn,
    evaluate_fn: Callable[[], dict[str, float]],
    meta: Mapping[str, np.ndarray],
    augment: bool,
    resume: bool = True,
    stop_at: Optional[int] = None,
    eval_at_start: bool = False,
) -> StageResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dumps())
    log_path = run_dir / METRICS
    config_hash = cfg.stage_hash(stage)
    seed = cfg.run.seed

    params = _prefixed(trainable)
    opt = SGD(params, schedule.momentum, schedule.weight_decay, _decay_names(trainable))
    sampler = D.BatchSampler(len(dataset), schedule.batch_size, seed)
    start = 0
    last = run_dir / LAST
    if resume and last.exists():
        saved = ckpt.load(last)
        if saved.config_hash != config_hash:
            raise ckpt.ConfigMismatchError(
                f"{last}: written under a different configuration; refusing to resume"
            )
        for prefix, mod in trainable.items():
            ckpt.load_module_state(mod, saved, prefix)
        for name, v in opt.velocity.items():
            np.copyto(v, saved.tensors[f"velocity.{name}"])
        start = saved.scalar("state.iteration")
        sampler.position = saved.scalar("state.sampler_position")
        _truncate_log(log_path, start)
    else:
        log_path.write_text("")
        if eval_at_start:
            first = evaluate_fn()
            log_path.write_text("iter=0 " + " ".join(f"{k}={_fmt(v)}" for k, v in first.items()) + "\n")

    frozen_sums = {name: ckpt.checksum(m) for name, m in frozen.items()}

    def verify_frozen():
        for name, mod in frozen.items():
            if ckpt.checksum(mod) != frozen_sums[name]:
                raise FrozenParameterError(f"frozen network '{name}' changed during {stage} training")

    def save(path, n):
        tensors = dict(meta)
        for prefix, mod in trainable.items():
            tensors.update(ckpt.module_state(mod, prefix))
        tensors.update({f"velocity.{k}": v for k, v in opt.velocity.items()})
        tensors["state.iteration"] = ckpt.int_tensor(n)
        tensors["state.sampler_position"] = ckpt.int_tensor(sampler.position)
        ckpt.save(path, tensors, config_hash)

    last_eval: dict[str, float] = {}
    end = iterations if stop_at is None else min(stop_at, iterations)
    with threadpool_limits(limits=cfg.run.threads), open(log_path, "a") as log:
        for mod in trainable.values():
            mod.train()
        for mod in frozen.values():
            mod.eval()
        for it in range(start, end):
            n = it + 1
            lr = poly_lr(schedule.lr, it, iterations, schedule.power)
            rng = np.random.default_rng([seed, STAGE_IDS[stage], n])
            images, masks = D.next_batch(dataset, sampler, augment, rng)
            try:
                total, parts = step(images, masks)
            except NonFiniteError as exc:
                raise TrainingError(f"{stage} iteration {n}: {exc}") from exc
            if not math.isfinite(total.item()):
                detail = " ".join(f"{k}={v}" for k, v in parts.items())
                raise TrainingError(f"{stage} iteration {n}: non-finite loss ({detail})")
            opt.zero_grad()
            total.backward()
            opt.step(lr)
            fields = " ".join(f"{k}={_fmt(v)}" for k, v in parts.items())
            log.write(f"iter={n} lr={_fmt(lr)} {fields} total={_fmt(total.item())}\n")

            every = cfg.run.eval_every
            if n == iterations or (every and n % every == 0):
                last_eval = evaluate_fn()
                for mod in trainable.values():
                    mod.train()
                log.write(f"iter={n} " + " ".join(f"{k}={_fmt(v)}" for k, v in last_eval.items()) + "\n")
            every = cfg.run.checkpoint_every
            if n == end or (every and n % every == 0):
                log.flush()
                verify_frozen()
                save(last, n)
    verify_frozen()
    final = run_dir / FINAL
    if end == iterations:
        save(final, iterations)
    return StageResult(run_dir, final, log_path, last_eval.get("val_miou"))


def _val_miou(net: SegNet, val: D.SegDataset) -> Callable[[], dict[str, float]]:
    return lambda: {"val_miou": evaluate(net, val).miou}


# ---------------------------------------------------------------------------
# stages


def train_teacher(cfg: RunConfig, run_dir, resume: bool = True,
                  stop_at: Optional[int] = None) -> StageResult:
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    net = TeacherNet(cfg.data.num_classes, cfg.teacher.output_stride, seed=cfg.run.seed)

    def step(images, masks):
        ce = F.softmax_cross_entropy(net(Tensor(images)).logits, masks)
        return ce, {"ce": ce.item(), "adapt": 0.0, "aff": 0.0}

    return _train_loop(
        stage="teacher", cfg=cfg, run_dir=run_dir, trainable={"teacher": net}, frozen={},
        schedule=cfg.teacher, iterations=cfg.teacher.iterations, dataset=train, step=step,
        evaluate_fn=_val_miou(net, val), meta=_meta("teacher", net),
        augment=cfg.run.augment, resume=resume, stop_at=stop_at,
    )


def translator_iterations(cfg: RunConfig) -> int:
    return cfg.translator.epochs * math.ceil(cfg.data.num_train / cfg.translator.batch_size)


PROBE_SIZE = 8


def probe_batch(dataset: D.SegDataset, size: int = PROBE_SIZE) -> np.ndarray:
    """The first ``size`` training images, un-augmented."""
    return dataset.images[:size]


def reconstruction_probe(teacher: TeacherNet, ae: TranslatorAE, images: np.ndarray,
                         alpha: float = 0.0) -> tuple[float, float]:
    """Eval-mode ``(reconstruction MSE, mean |code|)`` on a fixed batch."""
    was = ae.training
    ae.eval()
    try:
        with no_grad():
            feats = teacher(Tensor(images)).features
            mse, l1 = KD.reconstruction_terms(feats, ae.encode, ae.decode)
    finally:
        ae.train(was)
    return mse.item(), l1.item()


def train_autoencoder(cfg: RunConfig, teacher_ckpt, run_dir, resume: bool = True,
                      stop_at: Optional[int] = None) -> StageResult:
    teacher = load_teacher(cfg, teacher_ckpt)
    train = load_split(cfg, "train")
    ae = TranslatorAE(teacher.feat_channels, seed=cfg.run.seed)
    alpha = cfg.distill.alpha
    probe = probe_batch(train)

    def step(images, masks):
        with no_grad():
            feats = teacher(Tensor(images)).features
        mse, l1 = KD.reconstruction_terms(feats, ae.encode, ae.decode)
        total = mse + l1 * alpha if alpha else mse
        return total, {"recon": mse.item(), "code_l1": l1.item()}

    def probe_metrics():
        mse, l1 = reconstruction_probe(teacher, ae, probe)
        return {"probe_mse": mse, "probe_code_l1": l1}

    return _train_loop(
        stage="translator", cfg=cfg, run_dir=run_dir, trainable={"translator": ae},
        frozen={"teacher": teacher}, schedule=cfg.translator,
        iterations=translator_iterations(cfg), dataset=train, step=step,
        evaluate_fn=probe_metrics, meta=_meta("translator", ae),
        augment=False, resume=resume, stop_at=stop_at, eval_at_start=True,
    )


def distill_student(cfg: RunConfig, teacher_ckpt=None, ae_ckpt=None, run_dir=None,
                    mode: str = "distill", resume: bool = True,
                    stop_at: Optional[int] = None) -> StageResult:
    """Train the student under one of :data:`MODES`.

    ``distill`` uses the configured weights, ``affinity_only`` forces the
    adaptation weight to zero, ``plain`` is cross entropy alone, and ``kd``
    / ``fitnet`` are the comparison baselines.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if run_dir is None:
        raise ValueError("run_dir is required")
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    k, seed = cfg.data.num_classes, cfg.run.seed
    student = StudentNet(k, cfg.student.output_stride, seed=seed)
    trainable: dict[str, Module] = {"student": student}
    frozen: dict[str, Module] = {}
    hw = (train.images.shape[2], train.images.shape[3])

    teacher = ae = None
    if mode != "plain":
        teacher = load_teacher(cfg, teacher_ckpt)
        frozen["teacher"] = teacher
    if mode in ("distill", "affinity_only"):
        ae = load_translator(cfg, ae_ckpt)
        frozen["translator"] = ae
        check_alignment(teacher, student, ae, hw)
        c_s, c_t = student.feat_channels, teacher.feat_channels
        depth = cfg.student.adapter_depth
        adapt_net = Adapter(c_s, c_t, depth, seed=[seed, 1])
        aff_net = Adapter(c_s, c_t, depth, seed=[seed, 2])
        trainable.update({"adapter": adapt_net, "affinity_adapter": aff_net})
    if mode == "fitnet":
        proj = Projection(student.feat_channels, teacher.feat_channels, seed=[seed, 3])
        trainable["projection"] = proj

    weights = cfg.weights()
    if mode == "affinity_only":
        weights = KD.DistillWeights(weights.alpha, 0.0, weights.gamma, weights.p, weights.q)
    d = cfg.distill

    def step(images, masks):
        x = Tensor(images)
        out = student(x)
        ce = F.softmax_cross_entropy(out.logits, masks)
        if mode == "plain":
            return ce, {"ce": ce.item(), "adapt": 0.0, "aff": 0.0}
        with no_grad():
            t_out = teacher(x)
        if mode == "kd":
            kd = KD.kd_soft_loss(out.coarse_logits, t_out.coarse_logits, d.temperature)
            total = ce + kd * d.kd_weight
            return total, {"ce": ce.item(), "kd": kd.item()}
        if mode == "fitnet":
            fit = KD.fitnet_loss(out.features, t_out.features, proj)
            total = ce + fit * d.fitnet_weight
            return total, {"ce": ce.item(), "fitnet": fit.item()}
        code = KD.encode_frozen(ae.encode, t_out.features)
        adapt = KD.adaptation_from_code(adapt_net(out.features), code, weights.p, weights.q)
        aff = KD.affinity_from_code(aff_net(out.features), code)
        total = KD.total_student_loss(ce, adapt, aff, weights)
        return total, {"ce": ce.item(), "adapt": adapt.item(), "aff": aff.item()}

    return _train_loop(
        stage="student", cfg=cfg, run_dir=run_dir, trainable=trainable, frozen=frozen,
        schedule=cfg.student, iterations=cfg.student.iterations, dataset=train, step=step,
        evaluate_fn=_val_miou(student, val), meta=_meta("student", student),
        augment=cfg.run.augment, resume=resume, stop_at=stop_at,
    )


def run_baseline(cfg: RunConfig, mode: str, teacher_ckpt=None, ae_ckpt=None, run_dir=None,
                 **kwargs) -> StageResult:
    if mode not in ("kd", "fitnet", "affinity_only", "plain"):
        raise ValueError(f"unknown baseline {mode!r}")
    return distill_student(cfg, teacher_ckpt, ae_ckpt, run_dir, mode=mode, **kwargs)


def read_metrics(path) -> list[dict[str, float]]:
    """Parse a metrics log into one dict per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        row = {}
        for item in line.split():
            key, _, value = item.partition("=")
            row[key] = float(value)
        rows.append(row)
    return rows
