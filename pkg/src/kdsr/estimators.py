"""Scikit-learn style estimators wrapping the two-stage pipeline.

KDSRTeacher.fit trains the privileged stage-1 model on HR images (LR inputs
are synthesized on the fly). KDSRStudent.fit distills against a fitted
teacher; the fitted student is a predictor (LR batch -> SR batch) and a
transformer (LR batch -> degradation vectors), so it composes with sklearn
pipelines and model selection.
"""

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evalharness import idr_separability
from .training import Checkpoint, Restorer, TrainConfig, train_student, train_teacher
from .kd_ide import IDEConfig
from .sr_net import SRConfig
from .validation import as_batch, check_image_batch


class _KDSRBase(BaseEstimator):
    def _configs(self):
        ide = IDEConfig(C=self.channels, n_blocks=self.ide_blocks, scale=self.scale)
        sr = SRConfig(C=self.channels, n_blocks=self.sr_blocks, K=self.dynamic_kernel, scale=self.scale)
        return ide, sr

    def _restorer(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")
        return self.restorer_


class KDSRTeacher(_KDSRBase):
    """Stage-1 estimator: degradation encoder with HR access, trained jointly with SR."""

    def __init__(
        self,
        channels=16,
        ide_blocks=3,
        sr_blocks=4,
        dynamic_kernel=3,
        scale=4,
        learning_rate=1e-3,
        iterations=300,
        batch_size=8,
        patch_size=16,
        degradation_mode="iso",
        blur_kernel_size=21,
        seed=0,
    ):
        self.channels = channels
        self.ide_blocks = ide_blocks
        self.sr_blocks = sr_blocks
        self.dynamic_kernel = dynamic_kernel
        self.scale = scale
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.degradation_mode = degradation_mode
        self.blur_kernel_size = blur_kernel_size
        self.seed = seed

    def fit(self, X, y=None):
        """Train on HR images: (N, 3, H, W) array or a sequence of (3, H, W) arrays."""
        hr = check_image_batch(X, multiple_of=self.scale)
        ide_cfg, sr_cfg = self._configs()
        config = TrainConfig(
            stage=1,
            lr=self.learning_rate,
            iterations=self.iterations,
            batch_size=self.batch_size,
            patch_size=self.patch_size,
            degradation_mode=self.degradation_mode,
            kernel_size=self.blur_kernel_size,
            seed=self.seed,
        )
        self.checkpoint_ = train_teacher(hr, config, ide_config=ide_cfg, sr_config=sr_cfg)
        self.restorer_ = Restorer(self.checkpoint_)
        return self

    def restore(self, X_lr, X_hr):
        """SR with privileged HR access (the teacher's degradation input)."""
        r = self._restorer()
        lr = as_batch(check_image_batch(X_lr, "X_lr"))
        hr = as_batch(check_image_batch(X_hr, "X_hr", multiple_of=self.scale))
        return r.restore(lr, hr)

    def transform(self, X_lr, X_hr):
        """Compressed degradation vectors D, shape (N, channels)."""
        r = self._restorer()
        lr = as_batch(check_image_batch(X_lr, "X_lr"))
        hr = as_batch(check_image_batch(X_hr, "X_hr", multiple_of=self.scale))
        return r.degradation_vectors(lr, hr)[0]


class KDSRStudent(_KDSRBase):
    """Stage-2 estimator: blind SR from LR alone, distilled from a fitted teacher."""

    def __init__(
        self,
        teacher=None,
        learning_rate=1e-3,
        iterations=300,
        batch_size=8,
        patch_size=16,
        lambda_rec=1.0,
        lambda_kl=0.15,
        kd_loss="kl",
        degradation_mode="iso",
        blur_kernel_size=21,
        seed=0,
    ):
        self.teacher = teacher
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.lambda_rec = lambda_rec
        self.lambda_kl = lambda_kl
        self.kd_loss = kd_loss
        self.degradation_mode = degradation_mode
        self.blur_kernel_size = blur_kernel_size
        self.seed = seed

    def _teacher_checkpoint(self):
        if isinstance(self.teacher, Checkpoint):
            return self.teacher
        if isinstance(self.teacher, KDSRTeacher):
            if not hasattr(self.teacher, "checkpoint_"):
                raise NotFittedError("the supplied teacher is not fitted yet")
            return self.teacher.checkpoint_
        raise ValueError("teacher must be a fitted KDSRTeacher or a stage-1 Checkpoint")

    def fit(self, X, y=None):
        ckpt = self._teacher_checkpoint()
        scale = ckpt.config["sr"]["scale"]
        hr = check_image_batch(X, multiple_of=scale)
        config = TrainConfig(
            stage=2,
            lr=self.learning_rate,
            iterations=self.iterations,
            batch_size=self.batch_size,
            patch_size=self.patch_size,
            lambda_rec=self.lambda_rec,
            lambda_kl=self.lambda_kl,
            kd_loss_kind=self.kd_loss,
            degradation_mode=self.degradation_mode,
            kernel_size=self.blur_kernel_size,
            seed=self.seed,
        )
        self.checkpoint_ = train_student(hr, ckpt, config)
        self.restorer_ = Restorer(self.checkpoint_)
        return self

    def predict(self, X):
        """Super-resolve an LR batch; returns (N, 3, sH, sW) in [0, 1]."""
        r = self._restorer()
        lr = as_batch(check_image_batch(X))
        return r.restore(lr)

    def transform(self, X):
        """Compressed degradation vectors D, shape (N, channels), from LR alone."""
        r = self._restorer()
        lr = as_batch(check_image_batch(X))
        return r.degradation_vectors(lr)[0]

    def separability(self, X, sigmas=(0.5, 3.5), seed=0):
        """Inter/intra class distance ratio of D over blur widths (diagnostic)."""
        r = self._restorer()
        hr = check_image_batch(X, multiple_of=r.sr_cfg.scale)
        items = [(f"img{i:04d}", img) for i, img in enumerate(hr)]
        return idr_separability(r, items, sigmas, base_seed=seed)
