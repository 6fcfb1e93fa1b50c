"""Zero-shot dataset model, feature synthesis, and classification metrics.

The dataset holds per-class attribute vectors plus per-sample features with a
seen/unseen class split; feature rows are only reachable through
partition-scoped accessors that record every read, which is how the
inductive contract (no unseen features touched before evaluation) is
enforced and audited.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, ParameterError
from .genome import Genome, SearchSpace
from .numerics import OptimHyper, make_rng
from .supernet import Subnet, extract_standalone, init_for_genome
from .wgan import CriticConfig, GanBatch, gan_step

PARTITIONS = ("train_seen", "test_seen", "test_unseen")


def harmonic_mean(u: float, s: float) -> float:
    """2us/(u+s); zero when both are zero."""
    if u < 0 or s < 0:
        raise ParameterError(f"harmonic_mean needs non-negative inputs, got ({u}, {s})")
    if u + s == 0:
        return 0.0
    return 2.0 * u * s / (u + s)


@dataclass
class ZslMetrics:
    czsl_acc: float | None = None
    gzsl_u: float | None = None
    gzsl_s: float | None = None
    gzsl_h: float | None = None

    def __post_init__(self):
        for name in ("czsl_acc", "gzsl_u", "gzsl_s", "gzsl_h"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")

    def merged(self, other: "ZslMetrics") -> "ZslMetrics":
        pick = lambda a, b: a if a is not None else b
        return ZslMetrics(pick(self.czsl_acc, other.czsl_acc),
                          pick(self.gzsl_u, other.gzsl_u),
                          pick(self.gzsl_s, other.gzsl_s),
                          pick(self.gzsl_h, other.gzsl_h))

    def to_json(self) -> dict:
        return {"czsl_acc": self.czsl_acc, "gzsl_u": self.gzsl_u,
                "gzsl_s": self.gzsl_s, "gzsl_h": self.gzsl_h}


# ---------------------------------------------------------------------------
# dataset


class ZslDataset:
    """Features, labels, per-class attributes, and the seen/unseen split.

    Feature rows are private; read them through ``features_of(partition)`` or
    a train batcher.  Every read is tallied in ``access_log`` by partition.
    """

    def __init__(self, attr_matrix, features, labels, seen_classes,
                 unseen_classes, train_seen, test_seen, test_unseen):
        self.attr_matrix = np.asarray(attr_matrix, dtype=np.float64)
        self._features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.seen_classes = tuple(sorted(int(c) for c in seen_classes))
        self.unseen_classes = tuple(sorted(int(c) for c in unseen_classes))
        self._partitions = {
            "train_seen": np.asarray(train_seen, dtype=np.int64),
            "test_seen": np.asarray(test_seen, dtype=np.int64),
            "test_unseen": np.asarray(test_unseen, dtype=np.int64),
        }
        self.access_log: Counter = Counter()
        self._validate()

    def _validate(self):
        if self.attr_matrix.ndim != 2 or self._features.ndim != 2:
            raise FormatError("attr_matrix and features must be 2-D")
        if self.labels.shape[0] != self._features.shape[0]:
            raise FormatError("labels do not match the feature row count")
        seen, unseen = set(self.seen_classes), set(self.unseen_classes)
        if seen & unseen:
            raise FormatError(f"seen/unseen classes overlap: {sorted(seen & unseen)}")
        if not seen or not unseen:
            raise FormatError("need at least one seen and one unseen class")
        all_classes = seen | unseen
        if max(all_classes) >= self.attr_matrix.shape[0] or min(all_classes) < 0:
            raise FormatError("class index outside the attribute matrix")
        n = self._features.shape[0]
        for name, idx in self._partitions.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise FormatError(f"partition {name} has out-of-range indices")
        for name, allowed in (("train_seen", seen), ("test_seen", seen),
                              ("test_unseen", unseen)):
            bad = set(self.labels[self._partitions[name]].tolist()) - allowed
            if bad:
                raise FormatError(f"partition {name} contains labels {sorted(bad)} "
                                  f"outside its class set")
        counts = Counter()
        for idx in self._partitions.values():
            counts.update(idx.tolist())
        if counts and counts.most_common(1)[0][1] > 1:
            raise FormatError("partitions overlap")

    # -- shape info -------------------------------------------------------
    @property
    def attr_dim(self) -> int:
        return self.attr_matrix.shape[1]

    @property
    def feature_dim(self) -> int:
        return self._features.shape[1]

    @property
    def n_samples(self) -> int:
        return self._features.shape[0]

    def partition_indices(self, name: str) -> np.ndarray:
        return self._partitions[name].copy()

    # -- scoped access ----------------------------------------------------
    def features_of(self, partition: str):
        """(features, labels) of one partition; the read is logged."""
        if partition not in self._partitions:
            raise ParameterError(f"unknown partition {partition!r}")
        idx = self._partitions[partition]
        self.access_log[partition] += int(idx.size)
        return self._features[idx], self.labels[idx]

    def attrs_for(self, labels) -> np.ndarray:
        return self.attr_matrix[np.asarray(labels, dtype=np.int64)]

    def train_batcher(self) -> "SeenBatcher":
        return SeenBatcher(self)


class SeenBatcher:
    """Batch sampler scoped to the train_seen partition."""

    def __init__(self, ds: ZslDataset):
        self._ds = ds
        self._idx = ds.partition_indices("train_seen")
        if self._idx.size == 0:
            raise ParameterError("train_seen partition is empty")

    @property
    def n_train(self) -> int:
        return int(self._idx.size)

    def sample(self, rng: np.random.Generator, batch_size: int):
        feats, attrs, _ = self.sample_labeled(rng, batch_size)
        return feats, attrs

    def sample_labeled(self, rng: np.random.Generator, batch_size: int):
        pick = self._idx[rng.integers(0, self._idx.size, size=batch_size)]
        self._ds.access_log["train_seen"] += int(batch_size)
        labels = self._ds.labels[pick]
        return self._ds._features[pick], self._ds.attrs_for(labels), labels


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    seen: int = 12
    unseen: int = 4
    attr_dim: int = 16
    feature_dim: int = 32
    samples_per_class: int = 200
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.seen < 2 or self.unseen < 1:
            raise ParameterError(
                f"need >= 2 seen and >= 1 unseen classes, got {self.seen}/{self.unseen}"
            )
        if min(self.attr_dim, self.feature_dim, self.samples_per_class) < 1:
            raise ParameterError("dims and samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")


def gen_synthetic(spec: SyntheticSpec) -> ZslDataset:
    """Class attributes uniform in [0,1]; class feature mean = relu(T a);
    samples = mean + sigma * gaussian noise.  Seen samples split 80/20 into
    train/test per class; every unseen sample goes to the test partition.

    Arrays are rounded to float32 so a saved bundle reloads bit-identically.
    """
    rng = make_rng(spec.seed, "synthetic")
    n_classes = spec.seen + spec.unseen
    attrs = rng.random((n_classes, spec.attr_dim))
    mix = rng.normal(0.0, 1.0 / np.sqrt(spec.attr_dim),
                     size=(spec.feature_dim, spec.attr_dim))
    means = np.maximum(attrs @ mix.T, 0.0)

    per = spec.samples_per_class
    features = np.repeat(means, per, axis=0)
    features += spec.noise_sigma * rng.normal(size=features.shape)
    labels = np.repeat(np.arange(n_classes), per)

    attrs = attrs.astype(np.float32).astype(np.float64)
    features = features.astype(np.float32).astype(np.float64)

    seen = list(range(spec.seen))
    unseen = list(range(spec.seen, n_classes))
    train_seen, test_seen, test_unseen = [], [], []
    for c in range(n_classes):
        idx = np.where(labels == c)[0]
        if c in set(unseen):
            test_unseen.extend(idx.tolist())
            continue
        shuffled = idx[rng.permutation(idx.size)]
        cut = int(0.8 * idx.size)
        train_seen.extend(shuffled[:cut].tolist())
        test_seen.extend(shuffled[cut:].tolist())

    return ZslDataset(attrs, features, labels, seen, unseen,
                      train_seen, test_seen, test_unseen)


# ---------------------------------------------------------------------------
# bundle I/O: meta (JSON text) + little-endian binary matrices


_BUNDLE_FILES = ("features.bin", "attributes.bin", "labels.bin")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(ds: ZslDataset, path) -> None:
    from pathlib import Path

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ds._features.astype("<f4").tofile(root / "features.bin")
    ds.attr_matrix.astype("<f4").tofile(root / "attributes.bin")
    ds.labels.astype("<i4").tofile(root / "labels.bin")
    meta = {
        "format_version": 1,
        "counts": {
            "classes": int(ds.attr_matrix.shape[0]),
            "samples": int(ds.n_samples),
            "attr_dim": int(ds.attr_dim),
            "feature_dim": int(ds.feature_dim),
        },
        "seen_classes": list(ds.seen_classes),
        "unseen_classes": list(ds.unseen_classes),
        "partitions": {k: ds.partition_indices(k).tolist() for k in PARTITIONS},
        "checksums": {name: _sha256(root / name) for name in _BUNDLE_FILES},
    }
    with open(root / "meta", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> ZslDataset:
    from pathlib import Path

    root = Path(path)
    meta_path = root / "meta"
    if not meta_path.exists():
        raise FormatError(f"no meta file in bundle {root}")
    try:
        meta = json.loads(meta_path.read_text())
    except ValueError as exc:
        raise FormatError(f"meta is not valid JSON: {exc}") from exc
    for field in ("counts", "seen_classes", "unseen_classes", "partitions", "checksums"):
        if field not in meta:
            raise FormatError(f"meta missing field {field!r}")
    counts = meta["counts"]

    for name in _BUNDLE_FILES:
        fpath = root / name
        if not fpath.exists():
            raise FormatError(f"bundle missing file {name}")
        digest = _sha256(fpath)
        if digest != meta["checksums"].get(name):
            raise FormatError(f"checksum mismatch for {name}")

    def _load(name, dtype, shape):
        arr = np.fromfile(root / name, dtype=dtype)
        expected = int(np.prod(shape))
        if arr.size != expected:
            raise FormatError(
                f"{name} holds {arr.size} values, expected {expected} "
                f"for shape {shape}"
            )
        return arr.reshape(shape)

    n, d_x = counts["samples"], counts["feature_dim"]
    c, d_a = counts["classes"], counts["attr_dim"]
    features = _load("features.bin", "<f4", (n, d_x)).astype(np.float64)
    attrs = _load("attributes.bin", "<f4", (c, d_a)).astype(np.float64)
    labels = _load("labels.bin", "<i4", (n,)).astype(np.int64)
    parts = meta["partitions"]
    for key in PARTITIONS:
        if key not in parts:
            raise FormatError(f"partitions missing {key!r}")
    return ZslDataset(attrs, features, labels, meta["seen_classes"],
                      meta["unseen_classes"], parts["train_seen"],
                      parts["test_seen"], parts["test_unseen"])


def dataset_equal(a: ZslDataset, b: ZslDataset) -> bool:
    return (
        np.array_equal(a.attr_matrix, b.attr_matrix)
        and np.array_equal(a._features, b._features)
        and np.array_equal(a.labels, b.labels)
        and a.seen_classes == b.seen_classes
        and a.unseen_classes == b.unseen_classes
        and all(np.array_equal(a.partition_indices(k), b.partition_indices(k))
                for k in PARTITIONS)
    )


# ---------------------------------------------------------------------------
# softmax classifier


class SoftmaxClassifier:
    """Single affine layer + softmax over an explicit label space."""

    def __init__(self, label_space, dim: int):
        self.label_space = [int(c) for c in label_space]
        self._index = {c: i for i, c in enumerate(self.label_space)}
        self.w = np.zeros((len(self.label_space), dim))
        self.b = np.zeros(len(self.label_space))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T + self.b

    def probs(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        order = np.asarray(self.label_space)
        return order[np.argmax(self.logits(x), axis=1)]

    def rows_for(self, labels) -> np.ndarray:
        return np.asarray([self._index[int(c)] for c in labels])

    def nll(self, x: np.ndarray, labels) -> float:
        p = self.probs(x)
        rows = self.rows_for(labels)
        return float(-np.mean(np.log(p[np.arange(len(rows)), rows] + 1e-12)))

    def nll_grad_wrt_input(self, x: np.ndarray, labels) -> np.ndarray:
        """d(mean NLL)/dx, used as an auxiliary conditioning signal."""
        p = self.probs(x)
        rows = self.rows_for(labels)
        p[np.arange(len(rows)), rows] -= 1.0
        return (p / len(rows)) @ self.w


def train_classifier(features, labels, label_space, epochs: int = 25,
                     lr: float = 1e-3, batch_size: int = 100,
                     rng: np.random.Generator | None = None):
    """Cross-entropy training with Adam; returns (classifier, epoch losses)."""
    from .numerics import AdamState, adam_step

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = set(labels.tolist())
    missing = [c for c in label_space if c not in present]
    if missing:
        raise ParameterError(f"no training samples for classes {missing}")
    rng = rng if rng is not None else make_rng(0, "classifier")

    cls = SoftmaxClassifier(label_space, features.shape[1])
    rows = cls.rows_for(labels)
    sw, sb = AdamState.zeros_like(cls.w), AdamState.zeros_like(cls.b)
    hyper = OptimHyper(learning_rate=lr, beta1=0.9, beta2=0.999)
    n = features.shape[0]
    bs = min(batch_size, n)
    losses = []
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            x, r = features[sel], rows[sel]
            p = cls.probs(x)
            p[np.arange(len(r)), r] -= 1.0
            p /= len(r)
            adam_step(cls.w, p.T @ x, sw, hyper)
            adam_step(cls.b, p.sum(axis=0), sb, hyper)
        losses.append(cls.nll(features, labels))
    return cls, losses


# ---------------------------------------------------------------------------
# per-class evaluation


def per_class_accuracy(preds, labels, classes) -> float:
    """Macro top-1: mean over classes of (correct / count)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ParameterError("empty test partition")
    accs = []
    for c in classes:
        m = labels == c
        if m.any():
            accs.append(float(np.mean(preds[m] == c)))
    if not accs:
        raise ParameterError("no test samples for any class in the label space")
    return float(np.mean(accs))


def evaluate(ds: ZslDataset, classifier: SoftmaxClassifier, setting: str) -> ZslMetrics:
    """Per-class top-1 metrics; unseen-only for czsl, joint U/S/H for gzsl."""
    if setting == "czsl":
        if set(classifier.label_space) != set(ds.unseen_classes):
            raise ParameterError("czsl needs a classifier over the unseen classes")
        feats, labels = ds.features_of("test_unseen")
        return ZslMetrics(czsl_acc=per_class_accuracy(classifier.predict(feats),
                                                      labels, ds.unseen_classes))
    if setting == "gzsl":
        joint = set(ds.seen_classes) | set(ds.unseen_classes)
        if set(classifier.label_space) != joint:
            raise ParameterError("gzsl needs a classifier over seen + unseen classes")
        fu, lu = ds.features_of("test_unseen")
        fs, ls = ds.features_of("test_seen")
        u = per_class_accuracy(classifier.predict(fu), lu, ds.unseen_classes)
        s = per_class_accuracy(classifier.predict(fs), ls, ds.seen_classes)
        return ZslMetrics(gzsl_u=u, gzsl_s=s, gzsl_h=harmonic_mean(u, s))
    raise ParameterError(f"setting must be 'czsl' or 'gzsl', got {setting!r}")


# ---------------------------------------------------------------------------
# final GAN training and synthesis


@dataclass
class SynthConfig:
    per_class: int = 300
    cls_loss_weight: float = 0.01
    final_train_epochs: int = 100
    classifier_epochs: int = 25
    classifier_lr: float = 1e-3

    def __post_init__(self):
        if self.per_class < 1:
            raise ParameterError("per_class must be >= 1")
        if self.cls_loss_weight < 0:
            raise ParameterError("cls_loss_weight must be >= 0")
        if self.final_train_epochs < 1 or self.classifier_epochs < 1:
            raise ParameterError("epoch counts must be >= 1")


def train_final_gan(g_genome: Genome, d_genome: Genome, ds: ZslDataset,
                    cfg: SynthConfig, critic: CriticConfig, hyper: OptimHyper,
                    g_space: SearchSpace, d_space: SearchSpace,
                    batch_size: int = 64, seed: int = 0,
                    init_stores=None, logger=None) -> tuple[Subnet, Subnet]:
    """Train a standalone GAN pair on seen-class data only.

    Weights are freshly initialized unless ``init_stores`` provides the two
    shared search stores to copy from.  When ``cls_loss_weight`` > 0 a
    softmax classifier pre-trained on the seen training split scores every
    synthesized batch and its weighted NLL joins the generator loss.
    """
    rng = make_rng(seed, "final")
    if init_stores is not None:
        g_store, d_store = init_stores
        g_sub = extract_standalone(g_store, g_genome)
        d_sub = extract_standalone(d_store, d_genome)
    else:
        g_sub = Subnet(init_for_genome(g_space, g_genome, rng), g_genome)
        d_sub = Subnet(init_for_genome(d_space, d_genome, rng), d_genome)

    batcher = ds.train_batcher()
    aux = None
    if cfg.cls_loss_weight > 0:
        feats, labels = ds.features_of("train_seen")
        aux, _ = train_classifier(feats, labels, list(ds.seen_classes),
                                  epochs=cfg.classifier_epochs,
                                  lr=cfg.classifier_lr,
                                  rng=make_rng(seed, "final", "aux"))

    noise_dim = g_space.input_dims[1]
    slots = max(1, batcher.n_train // batch_size)
    step = 0
    try:
        for epoch in range(cfg.final_train_epochs):
            for _slot in range(slots):
                for _ in range(critic.n_critic):
                    feats, attrs, _labels = batcher.sample_labeled(rng, batch_size)
                    batch = GanBatch(feats, attrs, rng.normal(size=(batch_size, noise_dim)))
                    md = gan_step(d_sub, g_sub, batch, critic, hyper, "train_d", rng)
                    if logger is not None:
                        logger.log(epoch, step, "final", md.w_estimate, md.gp,
                                   float("nan"), md.d_loss)
                    step += 1
                feats, attrs, labels = batcher.sample_labeled(rng, batch_size)
                batch = GanBatch(feats, attrs, rng.normal(size=(batch_size, noise_dim)))
                extra = None
                if aux is not None:
                    weight = cfg.cls_loss_weight
                    lab = labels

                    def extra(fake, _aux=aux, _w=weight, _lab=lab):
                        term = _w * _aux.nll(fake, _lab)
                        grad = _w * _aux.nll_grad_wrt_input(fake, _lab)
                        return term, grad

                mg = gan_step(d_sub, g_sub, batch, critic, hyper, "train_g", rng,
                              extra_fake_grad=extra)
                if logger is not None:
                    logger.log(epoch, step, "final", float("nan"), float("nan"),
                               mg.g_loss, float("nan"))
                step += 1
    except NumericError as exc:
        raise NumericError(
            f"final GAN training diverged at step {step} "
            f"(generator {g_genome.role} genome): {exc}"
        ) from exc
    return g_sub, d_sub


def synthesize(g: Subnet, attr_rows: np.ndarray, class_ids, per_class: int,
               rng: np.random.Generator):
    """per_class eval-mode samples G(a_c, z) per target class, labeled c."""
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    attr_rows = np.asarray(attr_rows, dtype=np.float64)
    noise_dim = g.space.input_dims[1]
    feats, labels = [], []
    for row, c in zip(attr_rows, class_ids):
        a = np.tile(row, (per_class, 1))
        z = rng.normal(size=(per_class, noise_dim))
        fake, _ = g.forward(a, z, mode="eval")
        feats.append(fake)
        labels.extend([int(c)] * per_class)
    return np.concatenate(feats, axis=0), np.asarray(labels, dtype=np.int64)


def zero_shot_metrics(ds: ZslDataset, g: Subnet, cfg: SynthConfig,
                      seed: int = 0) -> ZslMetrics:
    """Synthesize unseen features, train the two classifiers, report
    CZSL accuracy and GZSL U/S/H."""
    rng = make_rng(seed, "synthesize")
    unseen = list(ds.unseen_classes)
    fake_x, fake_y = synthesize(g, ds.attrs_for(unseen), unseen, cfg.per_class, rng)

    czsl_cls, _ = train_classifier(fake_x, fake_y, unseen,
                                   epochs=cfg.classifier_epochs,
                                   lr=cfg.classifier_lr,
                                   rng=make_rng(seed, "czsl-cls"))
    metrics = evaluate(ds, czsl_cls, "czsl")

    real_x, real_y = ds.features_of("train_seen")
    joint_x = np.concatenate([fake_x, real_x], axis=0)
    joint_y = np.concatenate([fake_y, real_y])
    gzsl_cls, _ = train_classifier(joint_x, joint_y,
                                   list(ds.seen_classes) + unseen,
                                   epochs=cfg.classifier_epochs,
                                   lr=cfg.classifier_lr,
                                   rng=make_rng(seed, "gzsl-cls"))
    return metrics.merged(evaluate(ds, gzsl_cls, "gzsl"))


def oracle_czsl_accuracy(ds: ZslDataset, epochs: int = 25, lr: float = 1e-3,
                         seed: int = 0) -> float:
    """Supervised upper bound: train a softmax on 80% of the real unseen
    features per class, score per-class top-1 on the held-out 20%.

    Diagnostic only; reads the test_unseen partition.
    """
    feats, labels = ds.features_of("test_unseen")
    rng = make_rng(seed, "oracle")
    train_idx, eval_idx = [], []
    for c in ds.unseen_classes:
        idx = np.where(labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        cut = max(1, int(0.8 * idx.size))
        if cut == idx.size:   # keep at least one eval row per class
            cut = idx.size - 1 if idx.size > 1 else idx.size
        train_idx.extend(idx[:cut].tolist())
        eval_idx.extend(idx[cut:].tolist())
    if not eval_idx:
        raise ParameterError("not enough unseen samples for an oracle split")
    cls, _ = train_classifier(feats[train_idx], labels[train_idx],
                              list(ds.unseen_classes), epochs=epochs, lr=lr,
                              rng=make_rng(seed, "oracle-cls"))
    return per_class_accuracy(cls.predict(feats[eval_idx]), labels[eval_idx],
                              ds.unseen_classes)
