"""Shared-encoder multi-decoder network: build, forward passes, freezing, checkpoints.

The encoder is a small fully convolutional stack: one full-resolution stem
stage followed by stride-2 stages. Each segmentation decoder mirrors it
upward (nearest upsample -> skip concat -> two 3x3 conv+BN+relu blocks) and
ends in a 1x1 classification conv, so output size equals input size. A
classification head applies global average pooling and two fully connected
layers with dropout. An optional subtyping decoder can be attached after
base training; attaching freezes every pre-existing parameter group.

The receptive-field radius of the default architecture is 10 px, which is
what makes overlap-16 tiled inference bitwise equal to whole-image runs.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .autodiff import Parameter, Tensor


@dataclass
class DecoderSpec:
    task_id: str
    n_classes: int


@dataclass
class ClassificationSpec:
    task_id: str
    n_classes: int
    hidden: int = 64          # width of the first fully connected layer
    dropout: float = 0.3


@dataclass
class SubtypeSpec:
    task_id: str
    parent_task_id: str
    n_classes: int
    variant: str              # "pixel_a" | "pixel_b"


@dataclass
class ArchitectureConfig:
    stage_channels: tuple = (16, 32, 64)
    seg_input_hw: tuple = (64, 64)
    cls_input_hw: tuple = (32, 32)
    decoders: list = field(default_factory=list)
    classification: ClassificationSpec | None = None
    subtype: SubtypeSpec | None = None
    feature_stages: tuple | None = None   # encoder stages tapped by extract_features; None = all
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self):
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"bad stage channels {self.stage_channels}")
        ids = [d.task_id for d in self.decoders]
        if self.classification:
            ids.append(self.classification.task_id)
        if self.subtype:
            ids.append(self.subtype.task_id)
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids in {ids}")
        if self.classification and self.classification.hidden <= 0:
            raise ValueError("classification hidden width must be positive")
        if self.subtype and self.subtype.parent_task_id not in (d.task_id for d in self.decoders):
            raise ValueError(f"subtype parent {self.subtype.parent_task_id!r} has no decoder")
        if self.subtype and self.subtype.variant not in ("pixel_a", "pixel_b"):
            raise ValueError(f"unknown subtype variant {self.subtype.variant!r}")


def config_from_dict(d: dict) -> ArchitectureConfig:
    d = dict(d)
    d["decoders"] = [DecoderSpec(**x) for x in d.get("decoders", [])]
    if d.get("classification"):
        d["classification"] = ClassificationSpec(**d["classification"])
    if d.get("subtype"):
        d["subtype"] = SubtypeSpec(**d["subtype"])
    for key in ("stage_channels", "seg_input_hw", "cls_input_hw", "feature_stages"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return ArchitectureConfig(**d)


class ModelGraph:
    """Parameter store partitioned into groups with per-group trainability."""

    def __init__(self, config: ArchitectureConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.groups: dict[str, list] = {}
        self.group_trainable: dict[str, bool] = {}

    # -- registration -------------------------------------------------------

    def add_param(self, group: str, name: str, array: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = Parameter(Tensor(array), identifier=name,
                      trainable=self.group_trainable.get(group, True))
        self.params[name] = p
        self.groups.setdefault(group, []).append(name)
        self.group_trainable.setdefault(group, True)
        return p

    def add_buffer(self, name: str, array: np.ndarray):
        self.buffers[name] = array
        return array

    # -- access --------------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def group_params(self, group: str) -> list:
        return [self.params[n] for n in self.groups[group]]

    def parameters(self) -> list:
        return list(self.params.values())

    def trainable_parameters(self) -> list:
        return [p for p in self.params.values() if p.trainable]

    def set_group_trainable(self, group: str, flag: bool):
        self.group_trainable[group] = flag
        for name in self.groups[group]:
            self.params[name].set_trainable(flag)

    def n_parameters(self, group: str | None = None) -> int:
        names = self.groups[group] if group else self.params
        return sum(self.params[n].data.size for n in names)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with converted parameter/buffer dtype (gradcheck shadow)."""
        clone = ModelGraph(self.config)
        clone.group_trainable = dict(self.group_trainable)
        for group, names in self.groups.items():
            clone.groups[group] = list(names)
        for name, p in self.params.items():
            group = next(g for g, ns in self.groups.items() if name in ns)
            q = Parameter(Tensor(p.data.astype(dtype)), identifier=name,
                          trainable=p.trainable)
            clone.params[name] = q
        for name, b in self.buffers.items():
            clone.buffers[name] = b.astype(dtype) if b.dtype.kind == "f" else b.copy()
        return clone

    @property
    def n_stages(self) -> int:
        return len(self.config.stage_channels)

    @property
    def seg_divisor(self) -> int:
        return 2 ** self.n_stages


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def _init_conv(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
    b = np.zeros(cout, dtype=np.float32)
    return w, b


def _init_linear(rng, dout, din):
    bound = 1.0 / np.sqrt(din)
    w = rng.uniform(-bound, bound, size=(dout, din)).astype(np.float32)
    b = np.zeros(dout, dtype=np.float32)
    return w, b


def _add_conv_bn(model, rng, group, prefix, cin, cout, k=3):
    w, b = _init_conv(rng, cout, cin, k)
    model.add_param(group, f"{prefix}/conv/weight", w)
    model.add_param(group, f"{prefix}/conv/bias", b)
    model.add_param(group, f"{prefix}/bn/gamma", np.ones(cout, dtype=np.float32))
    model.add_param(group, f"{prefix}/bn/beta", np.zeros(cout, dtype=np.float32))
    model.add_buffer(f"{prefix}/bn/running_mean", np.zeros(cout, dtype=np.float32))
    model.add_buffer(f"{prefix}/bn/running_var", np.ones(cout, dtype=np.float32))


def _build_decoder_params(model, rng, group, prefix, channels, n_classes):
    chans = list(channels)
    for level in range(len(chans) - 1, 0, -1):
        cin = chans[level] + chans[level - 1]      # upsampled features + skip
        cout = chans[level - 1]
        _add_conv_bn(model, rng, group, f"{prefix}/up{level}/conv0", cin, cout)
        _add_conv_bn(model, rng, group, f"{prefix}/up{level}/conv1", cout, cout)
    w, b = _init_conv(rng, n_classes, chans[0], 1)
    model.add_param(group, f"{prefix}/head/weight", w)
    model.add_param(group, f"{prefix}/head/bias", b)


def build_model(config: ArchitectureConfig, rng: np.random.Generator) -> ModelGraph:
    """Deterministic build: same config + generator state gives identical parameters."""
    config.validate()
    model = ModelGraph(config)
    chans = list(config.stage_channels)

    cin = 3
    for i, cout in enumerate(chans, start=1):
        _add_conv_bn(model, rng, "encoder", f"encoder/stage{i}", cin, cout)
        cin = cout

    for spec in config.decoders:
        _build_decoder_params(model, rng, f"decoder/{spec.task_id}",
                              f"decoder/{spec.task_id}", chans, spec.n_classes)

    if config.classification:
        cls = config.classification
        group = f"head/{cls.task_id}"
        w, b = _init_linear(rng, cls.hidden, chans[-1])
        model.add_param(group, f"{group}/fc1/weight", w)
        model.add_param(group, f"{group}/fc1/bias", b)
        w, b = _init_linear(rng, cls.n_classes, cls.hidden)
        model.add_param(group, f"{group}/fc2/weight", w)
        model.add_param(group, f"{group}/fc2/bias", b)

    if config.subtype:
        _add_subtype_params(model, rng, config.subtype)
    return model


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _conv_bn_relu(model, prefix, x, mode, stride=1, pad=1):
    x = ad.conv2d(x, model.p(f"{prefix}/conv/weight"), model.p(f"{prefix}/conv/bias"),
                  stride=stride, pad=pad)
    x = ad.batch_norm2d(x, model.p(f"{prefix}/bn/gamma"), model.p(f"{prefix}/bn/beta"),
                        model.buffers[f"{prefix}/bn/running_mean"],
                        model.buffers[f"{prefix}/bn/running_var"],
                        mode=mode, eps=model.config.bn_eps,
                        momentum=model.config.bn_momentum)
    return ad.relu(x)


def forward_encoder(model: ModelGraph, batch: Tensor, mode: str) -> list:
    """Stage outputs, index 0 = full-resolution stem, later stages halve resolution."""
    batch = ad.as_tensor(batch)
    feats = []
    x = batch
    for i in range(1, model.n_stages + 1):
        stride = 1 if i == 1 else 2
        x = _conv_bn_relu(model, f"encoder/stage{i}", x, mode, stride=stride, pad=1)
        feats.append(x)
    return feats


def _forward_decoder(model, prefix, feats, mode):
    x = feats[-1]
    for level in range(len(feats) - 1, 0, -1):
        x = ad.upsample_nearest2x(x)
        x = ad.concat_channels(x, feats[level - 1])
        x = _conv_bn_relu(model, f"{prefix}/up{level}/conv0", x, mode)
        x = _conv_bn_relu(model, f"{prefix}/up{level}/conv1", x, mode)
    logits = ad.conv2d(x, model.p(f"{prefix}/head/weight"), model.p(f"{prefix}/head/bias"),
                       stride=1, pad=0)
    return logits, x


def _check_seg_input(model, batch):
    n, c, h, w = batch.shape
    if h % model.seg_divisor or w % model.seg_divisor:
        raise ad.ShapeError(
            f"segmentation input {h}x{w} not divisible by {model.seg_divisor}")


def forward_segmentation(model: ModelGraph, task_id: str, batch, mode: str,
                         feats: list | None = None) -> Tensor:
    """Per-pixel logits for one task's decoder; output spatial dims equal input dims."""
    if f"decoder/{task_id}" not in model.groups:
        raise KeyError(f"no decoder for task {task_id!r}")
    batch = ad.as_tensor(batch)
    _check_seg_input(model, batch)
    if feats is None:
        feats = forward_encoder(model, batch, mode)
    logits, _ = _forward_decoder(model, f"decoder/{task_id}", feats, mode)
    return logits


def forward_classification(model: ModelGraph, batch, mode: str,
                           rng: np.random.Generator | None = None) -> Tensor:
    """Pooled-feature classifier: GAP -> FC -> relu -> dropout -> FC."""
    cls = model.config.classification
    if cls is None:
        raise KeyError("model has no classification head")
    batch = ad.as_tensor(batch)
    n, c, h, w = batch.shape
    if (h, w) != tuple(model.config.cls_input_hw):
        raise ad.ShapeError(
            f"classification input {h}x{w} != super-task size {model.config.cls_input_hw}")
    feats = forward_encoder(model, batch, mode)
    group = f"head/{cls.task_id}"
    x = ad.global_avg_pool(feats[-1])
    x = ad.linear(x, model.p(f"{group}/fc1/weight"), model.p(f"{group}/fc1/bias"))
    x = ad.relu(x)
    x = ad.dropout(x, cls.dropout, mode, rng)
    return ad.linear(x, model.p(f"{group}/fc2/weight"), model.p(f"{group}/fc2/bias"))


def forward_subtype(model: ModelGraph, batch, mode: str, feats=None) -> Tensor:
    """Logits of the subtyping branch (requires an attached subtype decoder)."""
    sub = model.config.subtype
    if sub is None:
        raise KeyError("no subtype decoder attached")
    batch = ad.as_tensor(batch)
    _check_seg_input(model, batch)
    if feats is None:
        feats = forward_encoder(model, batch, mode)
    prefix = f"subtype/{sub.task_id}"
    if sub.variant == "pixel_b":
        logits, _ = _forward_decoder(model, prefix, feats, mode)
        return logits
    # pixel_a: reuse the parent decoder features after its final upsample block
    _, parent_feats = _forward_decoder(model, f"decoder/{sub.parent_task_id}", feats, mode)
    return ad.conv2d(parent_feats, model.p(f"{prefix}/head/weight"),
                     model.p(f"{prefix}/head/bias"), stride=1, pad=0)


def forward_all(model: ModelGraph, image) -> tuple:
    """Single eval-mode pass: encoder once, every attached branch decoded from it.

    Returns ({task_id: logits Tensor}, skipped) where `skipped` lists branches
    whose super-task input size does not match this image.
    """
    image = ad.as_tensor(image)
    _check_seg_input(model, image)
    feats = forward_encoder(model, image, "eval")
    outputs = {}
    skipped = []
    for spec in model.config.decoders:
        logits, _ = _forward_decoder(model, f"decoder/{spec.task_id}", feats, "eval")
        outputs[spec.task_id] = logits
    if model.config.subtype:
        outputs[model.config.subtype.task_id] = forward_subtype(model, image, "eval", feats=feats)
    cls = model.config.classification
    if cls is not None:
        if image.shape[2:] == tuple(model.config.cls_input_hw):
            outputs[cls.task_id] = forward_classification(model, image, "eval")
        else:
            skipped.append(cls.task_id)
    return outputs, skipped


def extract_features(model: ModelGraph, batch, stages=None) -> np.ndarray:
    """Concatenated per-stage global-average-pooled features (read-only pass)."""
    stages = stages if stages is not None else model.config.feature_stages
    stages = list(stages) if stages is not None else list(range(1, model.n_stages + 1))
    if not stages:
        raise ValueError("stage list must be non-empty")
    if any(not 1 <= s <= model.n_stages for s in stages):
        raise ValueError(f"stage indices {stages} outside 1..{model.n_stages}")
    feats = forward_encoder(model, ad.as_tensor(batch), "eval")
    pooled = [ad.global_avg_pool(feats[s - 1]).data for s in stages]
    return np.concatenate(pooled, axis=1)


# ---------------------------------------------------------------------------
# Subtype attachment
# ---------------------------------------------------------------------------


def _add_subtype_params(model, rng, sub: SubtypeSpec):
    chans = list(model.config.stage_channels)
    prefix = f"subtype/{sub.task_id}"
    if sub.variant == "pixel_b":
        _build_decoder_params(model, rng, prefix, prefix, chans, sub.n_classes)
    else:
        w, b = _init_conv(rng, sub.n_classes, chans[0], 1)
        model.add_param(prefix, f"{prefix}/head/weight", w)
        model.add_param(prefix, f"{prefix}/head/bias", b)


def attach_subtype_decoder(model: ModelGraph, parent_task_id: str, num_classes: int,
                           variant: str, rng: np.random.Generator,
                           task_id: str | None = None) -> ModelGraph:
    """Add the subtyping branch and freeze everything that already existed."""
    if model.config.subtype is not None:
        raise ValueError("model already has a subtype decoder")
    if f"decoder/{parent_task_id}" not in model.groups:
        raise KeyError(f"parent task {parent_task_id!r} has no decoder")
    sub = SubtypeSpec(task_id=task_id or f"{parent_task_id}_subtype",
                      parent_task_id=parent_task_id,
                      n_classes=num_classes, variant=variant)
    model.config.subtype = sub
    model.config.validate()
    for group in list(model.groups):
        model.set_group_trainable(group, False)
    _add_subtype_params(model, rng, sub)
    model.set_group_trainable(f"subtype/{sub.task_id}", True)
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    pass


def _zip_write(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _container_bytes(array) -> bytes:
    buf = io.BytesIO()
    tmp = _TmpPath(buf)
    datamod.write_container(tmp, array)
    return buf.getvalue()


class _TmpPath:
    """Minimal Path stand-in so container IO can target an in-memory buffer."""

    def __init__(self, buf):
        self.buf = buf

    def write_bytes(self, blob):
        self.buf.write(blob)

    def read_bytes(self):
        return self.buf.getvalue()


def save_checkpoint(path, model: ModelGraph, adam: "ad.AdamState | None" = None,
                    step: int = 0, extra: dict | None = None) -> None:
    """Write parameters, buffers, optimizer state and the config digest as one file.

    Deterministic bytes: fixed entry order, stored (uncompressed) payloads and
    zeroed timestamps, so identical state always produces identical files.
    """
    meta = {
        "format_version": 1,
        "config": asdict(model.config),
        "config_digest": model.config.digest(),
        "step": step,
        "group_trainable": model.group_trainable,
        "extra": extra or {},
    }
    if adam is not None:
        meta["adam"] = {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                        "step": adam.step,
                        "n_updates": {k: v[2] for k, v in sorted(adam.moments.items())}}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, default=list).encode())
        for name in sorted(model.params):
            _zip_write(zf, f"param/{name}", _container_bytes(model.params[name].data))
        for name in sorted(model.buffers):
            _zip_write(zf, f"buffer/{name}", _container_bytes(model.buffers[name]))
        if adam is not None:
            for name in sorted(adam.moments):
                m, v, _ = adam.moments[name]
                _zip_write(zf, f"adam_m/{name}", _container_bytes(m))
                _zip_write(zf, f"adam_v/{name}", _container_bytes(v))


def _read_member(zf, name):
    buf = io.BytesIO(zf.read(name))
    return datamod.read_container(_TmpPath(buf))


def load_checkpoint(path, expect_config: ArchitectureConfig | None = None):
    """Rebuild (model, adam, step) from a checkpoint file.

    If `expect_config` is given its digest must match the stored one.
    """
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        config = config_from_dict(meta["config"])
        if expect_config is not None and expect_config.digest() != meta["config_digest"]:
            raise CheckpointError(
                f"config digest mismatch: checkpoint {meta['config_digest']} "
                f"vs expected {expect_config.digest()}")
        model = build_model(config, np.random.default_rng(0))
        for group, flag in meta["group_trainable"].items():
            model.set_group_trainable(group, flag)
        for name, p in model.params.items():
            p.tensor.data = _read_member(zf, f"param/{name}")
        for name in model.buffers:
            model.buffers[name] = _read_member(zf, f"buffer/{name}")
        adam = None
        if "adam" in meta:
            a = meta["adam"]
            adam = ad.AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                                step=a["step"])
            for name in model.params:
                key_m, key_v = f"adam_m/{name}", f"adam_v/{name}"
                if key_m in zf.namelist():
                    adam.moments[name] = (_read_member(zf, key_m), _read_member(zf, key_v),
                                          a["n_updates"].get(name, 0))
        return model, adam, meta["step"]
