"""Two-stage training and checkpointing.

Stage 1 trains the teacher estimator jointly with the SR network under the
reconstruction loss alone; degradations are sampled fresh per patch so a
small dataset still covers the blur range. Stage 2 initializes the student
from the teacher, freezes the teacher, and adds the distillation term that
pulls the student's D' toward the teacher's.

Checkpoints are a directory of manifest.json + params.bin + config.json,
with tensors stored as little-endian float32 in one contiguous blob; the
roundtrip is bit-exact.
"""

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import degradation, kd_ide, sr_net
from .diffops import Tensor, adam_step, add, kd_l1_loss, kd_l2_loss, kl_loss, l1_loss, scale

KD_LOSSES = {"kl": kl_loss, "l1": kd_l1_loss, "l2": kd_l2_loss}


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-3
    iterations: int = 300
    batch_size: int = 8
    patch_size: int = 16  # LR pixels
    lambda_rec: float = 1.0
    lambda_kl: float = 0.15
    kd_loss_kind: str = "kl"
    seed: int = 0
    degradation_mode: str = "iso"
    kernel_size: int = 21
    dtype: str = "float32"

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_kl < 0:
            raise ValueError("loss weights must be >= 0")
        if self.kd_loss_kind not in KD_LOSSES:
            raise ValueError(f"kd_loss_kind must be one of {sorted(KD_LOSSES)}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")


@dataclass
class Checkpoint:
    """Named float32 parameter arrays plus the run's configuration and rng state."""

    params: dict  # name -> np.ndarray (float32), names prefixed "ide." / "sr."
    config: dict  # {"ide": ..., "sr": ..., "train": ...}
    rng_state: dict
    iteration: int = 0

    def subset(self, prefix):
        return {
            name[len(prefix):]: arr for name, arr in self.params.items() if name.startswith(prefix)
        }


def _atomic_write(path, data, mode="w"):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode if "b" in mode else "w") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_io(path, mode, ckpt=None):
    """Save to or load from a checkpoint directory (manifest.json, params.bin, config.json)."""
    if mode == "save":
        if ckpt is None:
            raise ValueError("save mode requires a checkpoint")
        os.makedirs(path, exist_ok=True)
        entries, chunks, offset = [], [], 0
        for name, arr in ckpt.params.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset}
            )
            chunks.append(blob)
            offset += len(blob)
        manifest = {
            "iteration": ckpt.iteration,
            "rng_state": ckpt.rng_state,
            "blob_bytes": offset,
            "tensors": entries,
        }
        _atomic_write(os.path.join(path, "params.bin"), b"".join(chunks), mode="wb")
        _atomic_write(os.path.join(path, "config.json"), json.dumps(ckpt.config, indent=1))
        _atomic_write(os.path.join(path, "manifest.json"), json.dumps(manifest, indent=1))
        return None
    if mode == "load":
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        with open(os.path.join(path, "config.json")) as f:
            config = json.load(f)
        blob = open(os.path.join(path, "params.bin"), "rb").read()
        if manifest["blob_bytes"] != len(blob):
            raise ValueError(
                f"corrupt checkpoint: manifest says {manifest['blob_bytes']} bytes, "
                f"blob has {len(blob)}"
            )
        params, expected_offset = {}, 0
        for e in manifest["tensors"]:
            if e["dtype"] != "<f4":
                raise ValueError(f"unsupported dtype {e['dtype']} for tensor {e['name']!r}")
            if e["offset"] != expected_offset:
                raise ValueError(f"corrupt manifest: bad offset for tensor {e['name']!r}")
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            nbytes = 4 * n
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
            params[e["name"]] = arr.reshape(e["shape"]).copy()
            expected_offset += nbytes
        if expected_offset != len(blob):
            raise ValueError("corrupt manifest: tensor sizes do not cover the blob")
        return Checkpoint(
            params=params,
            config=config,
            rng_state=manifest["rng_state"],
            iteration=manifest["iteration"],
        )
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")


def _merge_params(ide_params, sr_params):
    merged = {}
    for name, t in ide_params.items():
        merged["ide." + name] = t.data.astype("<f4")
    for name, t in sr_params.items():
        merged["sr." + name] = t.data.astype("<f4")
    return merged


def _np_dtype(name):
    return {"float32": np.float32, "float64": np.float64}[name]


class LossLog:
    """Per-iteration loss components, serializable as CSV with exact float text."""

    def __init__(self):
        self.rows = []  # (iteration, l_rec, l_kd, total)

    def append(self, iteration, l_rec, l_kd, total):
        self.rows.append((iteration, float(l_rec), float(l_kd), float(total)))

    def write(self, path):
        with open(path, "w", newline="") as f:
            f.write("iteration,l_rec,l_kd,total\n")
            for it, l_rec, l_kd, total in self.rows:
                f.write(f"{it},{l_rec:.17g},{l_kd:.17g},{total:.17g}\n")

    @staticmethod
    def read(path):
        log = LossLog()
        with open(path) as f:
            next(f)
            for line in f:
                it, l_rec, l_kd, total = line.strip().split(",")
                log.append(int(it), float(l_rec), float(l_kd), float(total))
        return log


def _sample_batch(hr_images, lr_images, config, rng, sr_scale, dtype):
    """Crop aligned HR/LR patch pairs; degrade on the fly unless LR is pre-baked."""
    s = sr_scale
    p_lr = config.patch_size
    p_hr = p_lr * s
    hr_batch, lr_batch = [], []
    for _ in range(config.batch_size):
        idx = int(rng.integers(len(hr_images)))
        hr = hr_images[idx]
        _, h, w = hr.shape
        if h < p_hr or w < p_hr:
            raise ValueError(f"image {idx} of size {h}x{w} smaller than HR patch {p_hr}")
        oy = int(rng.integers((h - p_hr) // s + 1)) * s
        ox = int(rng.integers((w - p_hr) // s + 1)) * s
        hr_patch = hr[:, oy : oy + p_hr, ox : ox + p_hr]
        if lr_images is None:
            spec = degradation.sample_degradation(
                config.degradation_mode, rng, scale=s, size=config.kernel_size
            )
            lr_patch = degradation.degrade(hr_patch, spec, rng)
        else:
            lr_patch = lr_images[idx][:, oy // s : oy // s + p_lr, ox // s : ox // s + p_lr]
        hr_batch.append(hr_patch)
        lr_batch.append(lr_patch)
    return np.stack(hr_batch).astype(dtype), np.stack(lr_batch).astype(dtype)


def _check_data(hr_images, config):
    if len(hr_images) == 0:
        raise ValueError("empty dataset")
    if len(hr_images) < config.batch_size:
        raise ValueError(f"dataset of {len(hr_images)} images smaller than batch {config.batch_size}")


def train_teacher(hr_images, config, ide_config=None, sr_config=None, lr_images=None, log=None):
    """Stage 1: jointly optimize the teacher estimator and the SR network under L1.

    hr_images: sequence of (3, H, W) arrays in [0, 1]. Returns the final
    Checkpoint; pass a LossLog to capture the loss trajectory.
    """
    if config.stage != 1:
        raise ValueError("train_teacher requires a stage-1 config")
    _check_data(hr_images, config)
    sr_cfg = sr_config or sr_net.SRConfig()
    ide_cfg = kd_ide.teacher_config(ide_config or kd_ide.IDEConfig(scale=sr_cfg.scale))
    dtype = _np_dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    ide_params = kd_ide.init_params(ide_cfg, rng, dtype)
    sr_params = sr_net.init_params(sr_cfg, rng, dtype)

    for it in range(config.iterations):
        hr_b, lr_b = _sample_batch(hr_images, lr_images, config, rng, sr_cfg.scale, dtype)
        x = Tensor(kd_ide.make_teacher_input(lr_b, hr_b, sr_cfg.scale))
        pair = kd_ide.ide_forward(ide_params, ide_cfg, x)
        sr_out = sr_net.sr_forward(lr_b, pair.d, sr_params, sr_cfg)
        loss = l1_loss(sr_out, hr_b)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        ide_params.zero_grad()
        sr_params.zero_grad()
        loss.backward()
        adam_step(ide_params, lr=config.lr)
        adam_step(sr_params, lr=config.lr)
        if log is not None:
            log.append(it, loss.data, 0.0, loss.data)

    return Checkpoint(
        params=_merge_params(ide_params, sr_params),
        config={
            "ide": dataclasses.asdict(ide_cfg),
            "sr": dataclasses.asdict(sr_cfg),
            "train": dataclasses.asdict(config),
        },
        rng_state=rng.bit_generator.state,
        iteration=config.iterations,
    )


def _build_params(module, cfg, state, dtype, frozen=False):
    params = module.init_params(cfg, np.random.default_rng(0), dtype)
    params.load_state(state)
    if frozen:
        for t in params.tensors():
            t.requires_grad = False
    return params


def train_student(hr_images, teacher_ckpt, config, lr_images=None, log=None):
    """Stage 2: distill the student estimator against the frozen teacher.

    The student estimator starts from the teacher's parameters (first conv
    sliced to the LR channels); the SR network starts from the teacher
    checkpoint and keeps training. Loss is
    lambda_rec * L1 + lambda_kl * kd_loss(D'_T, D'_S); with lambda_kl = 0
    the distillation term is skipped entirely (the no-KD ablation arm).
    """
    if config.stage != 2:
        raise ValueError("train_student requires a stage-2 config")
    _check_data(hr_images, config)
    dtype = _np_dtype(config.dtype)
    sr_cfg = sr_net.SRConfig(**teacher_ckpt.config["sr"])
    t_ide_cfg = kd_ide.IDEConfig(**teacher_ckpt.config["ide"])
    s_ide_cfg = kd_ide.IDEConfig(
        C=t_ide_cfg.C, n_blocks=t_ide_cfg.n_blocks, in_channels=3, scale=t_ide_cfg.scale
    )
    teacher_params = _build_params(kd_ide, t_ide_cfg, teacher_ckpt.subset("ide."), dtype, frozen=True)
    student_params = kd_ide.init_student_from_teacher(teacher_params, s_ide_cfg)
    sr_params = _build_params(sr_net, sr_cfg, teacher_ckpt.subset("sr."), dtype)

    kd_fn = KD_LOSSES[config.kd_loss_kind]
    rng = np.random.default_rng(config.seed)
    use_kd = config.lambda_kl > 0

    for it in range(config.iterations):
        hr_b, lr_b = _sample_batch(hr_images, lr_images, config, rng, sr_cfg.scale, dtype)
        s_pair = kd_ide.ide_forward(student_params, s_ide_cfg, Tensor(lr_b))
        sr_out = sr_net.sr_forward(lr_b, s_pair.d, sr_params, sr_cfg)
        l_rec = l1_loss(sr_out, hr_b)
        if use_kd:
            x_t = Tensor(kd_ide.make_teacher_input(lr_b, hr_b, sr_cfg.scale))
            t_pair = kd_ide.ide_forward(teacher_params, t_ide_cfg, x_t)
            l_kd = kd_fn(t_pair.d_prime.data, s_pair.d_prime)
            loss = add(scale(l_rec, config.lambda_rec), scale(l_kd, config.lambda_kl))
            l_kd_val = float(l_kd.data)
        else:
            loss = scale(l_rec, config.lambda_rec)
            l_kd_val = 0.0
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        student_params.zero_grad()
        sr_params.zero_grad()
        loss.backward()
        adam_step(student_params, lr=config.lr)
        adam_step(sr_params, lr=config.lr)
        if log is not None:
            log.append(it, l_rec.data, l_kd_val, loss.data)

    return Checkpoint(
        params=_merge_params(student_params, sr_params),
        config={
            "ide": dataclasses.asdict(s_ide_cfg),
            "sr": dataclasses.asdict(sr_cfg),
            "train": dataclasses.asdict(config),
        },
        rng_state=rng.bit_generator.state,
        iteration=config.iterations,
    )


def initial_checkpoint(ide_config, sr_config, seed=0, dtype="float32"):
    """Checkpoint of a freshly initialized, untrained model (baseline runs)."""
    np_dtype = _np_dtype(dtype)
    rng = np.random.default_rng(seed)
    ide_params = kd_ide.init_params(ide_config, rng, np_dtype)
    sr_params = sr_net.init_params(sr_config, rng, np_dtype)
    return Checkpoint(
        params=_merge_params(ide_params, sr_params),
        config={
            "ide": dataclasses.asdict(ide_config),
            "sr": dataclasses.asdict(sr_config),
            "train": dataclasses.asdict(TrainConfig(seed=seed, iterations=0)),
        },
        rng_state=rng.bit_generator.state,
        iteration=0,
    )


class Restorer:
    """Frozen inference wrapper around a checkpoint (teacher or student)."""

    def __init__(self, ckpt, dtype="float32"):
        np_dtype = _np_dtype(dtype)
        self.ide_cfg = kd_ide.IDEConfig(**ckpt.config["ide"])
        self.sr_cfg = sr_net.SRConfig(**ckpt.config["sr"])
        self.ide_params = _build_params(
            kd_ide, self.ide_cfg, ckpt.subset("ide."), np_dtype, frozen=True
        )
        self.sr_params = _build_params(
            sr_net, self.sr_cfg, ckpt.subset("sr."), np_dtype, frozen=True
        )
        self.is_teacher = self.ide_cfg.in_channels != 3
        self.dtype = np_dtype

    def _ide_input(self, lr, hr):
        lr = np.asarray(lr, dtype=self.dtype)
        if self.is_teacher:
            if hr is None:
                raise ValueError("teacher checkpoints need the HR image to estimate degradation")
            hr = np.asarray(hr, dtype=self.dtype)
            return lr, kd_ide.make_teacher_input(lr, hr, self.sr_cfg.scale)
        return lr, lr

    def degradation_vectors(self, lr, hr=None):
        """(D, D') as numpy arrays for a (N, 3, H, W) LR batch."""
        lr, x = self._ide_input(lr, hr)
        pair = kd_ide.ide_forward(self.ide_params, self.ide_cfg, Tensor(x))
        return pair.d.data, pair.d_prime.data

    def restore(self, lr, hr=None):
        """SR a (N, 3, H, W) LR batch; output clamped to [0, 1]."""
        lr, x = self._ide_input(lr, hr)
        pair = kd_ide.ide_forward(self.ide_params, self.ide_cfg, Tensor(x))
        out = sr_net.sr_forward(lr, pair.d, self.sr_params, self.sr_cfg)
        return np.clip(out.data, 0.0, 1.0)
