"""The four IMPACTX sub-networks and their composition.

``M`` is a LeNet-5 style backbone producing K class scores. ``LEP`` shares
M's convolutional topology (own weights) but ends in a single sigmoid dense
layer of width ``latent_dim``. The decoder maps the latent code back to a
single-channel attribution map through an FC seed grid and repeated
[Conv, Conv, UpSampling] blocks. ``C`` classifies concat(m, z).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import DimensionError, FormatError, StateError

SUBNETS = ("m", "lep", "decoder", "classifier")


@dataclass
class BackboneSpec:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    filters: tuple[int, ...] = (6, 16)
    hidden: tuple[int, ...] = (120, 84)
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.filters = tuple(self.filters)
        self.hidden = tuple(self.hidden)
        if self.num_classes < 2:
            raise DimensionError(f"need at least 2 classes, got {self.num_classes}")
        _, h, w = self.input_shape
        scale = 2 ** len(self.filters)
        if h % scale or w % scale:
            raise DimensionError(f"input {h}x{w} not divisible by pooling factor {scale}")


@dataclass
class ImpactxSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    latent_dim: int = 512
    decoder_seed_channels: int = 32
    decoder_filters: tuple[int, ...] | None = None
    classifier_hidden: int = 128

    def __post_init__(self):
        if self.decoder_filters is None:
            h = self.backbone.input_shape[1]
            self.decoder_filters = (16, 8) if h <= 32 else (16, 8, 8)
        self.decoder_filters = tuple(self.decoder_filters)
        _, h, w = self.backbone.input_shape
        scale = 2 ** len(self.decoder_filters)
        if h % scale or w % scale:
            raise DimensionError(f"decoder cannot reach {h}x{w} with {len(self.decoder_filters)} blocks")


class Module:
    """Ordered, named parameter container."""

    def __init__(self):
        self._params: dict[str, nx.Parameter] = {}

    def add(self, name: str, param: nx.Parameter) -> nx.Parameter:
        self._params[name] = param
        return param

    @property
    def params(self) -> dict[str, nx.Parameter]:
        return self._params

    def named_parameters(self) -> list[tuple[str, nx.Parameter]]:
        return list(self._params.items())

    def parameters(self) -> list[nx.Parameter]:
        return list(self._params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag


def _conv_params(mod: Module, prefix: str, rng, cin: int, cout: int) -> None:
    mod.add(f"{prefix}.k", nx.kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9))
    mod.add(f"{prefix}.b", nx.zeros((cout,)))


def _dense_params(mod: Module, prefix: str, rng, fin: int, fout: int) -> None:
    mod.add(f"{prefix}.w", nx.kaiming_uniform(rng, (fin, fout), fin))
    mod.add(f"{prefix}.b", nx.zeros((fout,)))


class ConvNet(Module):
    """[conv3x3 -> relu -> maxpool] blocks followed by a dense stack."""

    def __init__(self, spec: BackboneSpec, rng, widths: tuple[int, ...], head: str = "linear"):
        super().__init__()
        self.spec = spec
        self.head = head
        c, h, w = spec.input_shape
        cin = c
        for i, f in enumerate(spec.filters):
            _conv_params(self, f"conv{i}", rng, cin, f)
            cin = f
        scale = 2 ** len(spec.filters)
        fin = cin * (h // scale) * (w // scale)
        self.widths = widths
        for i, width in enumerate(widths):
            _dense_params(self, f"fc{i}", rng, fin, width)
            fin = width

    def __call__(self, x) -> nx.Tensor:
        x = nx.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"expected input (n, {self.spec.input_shape}), got {x.shape}")
        p = self._params
        for i in range(len(self.spec.filters)):
            x = nx.maxpool2d(nx.relu(nx.conv2d(x, p[f"conv{i}.k"], p[f"conv{i}.b"])))
        x = nx.flatten(x)
        last = len(self.widths) - 1
        for i in range(len(self.widths)):
            x = nx.dense(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
            if i < last:
                x = nx.relu(x)
        return nx.sigmoid(x) if self.head == "sigmoid" else x


class Decoder(Module):
    def __init__(self, spec: ImpactxSpec, rng):
        super().__init__()
        _, h, w = spec.backbone.input_shape
        self.latent_dim = spec.latent_dim
        self.blocks = len(spec.decoder_filters)
        self.seed_shape = (spec.decoder_seed_channels, h >> self.blocks, w >> self.blocks)
        _dense_params(self, "fc", rng, spec.latent_dim, int(np.prod(self.seed_shape)))
        cin = spec.decoder_seed_channels
        for i, f in enumerate(spec.decoder_filters):
            _conv_params(self, f"block{i}.conv0", rng, cin, f)
            _conv_params(self, f"block{i}.conv1", rng, f, f)
            cin = f
        _conv_params(self, "out", rng, cin, 1)

    def __call__(self, z) -> nx.Tensor:
        z = nx.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(f"decoder expects (n, {self.latent_dim}), got {z.shape}")
        p = self._params
        x = nx.relu(nx.dense(z, p["fc.w"], p["fc.b"]))
        x = nx.reshape(x, (z.shape[0],) + self.seed_shape)
        for i in range(self.blocks):
            x = nx.relu(nx.conv2d(x, p[f"block{i}.conv0.k"], p[f"block{i}.conv0.b"]))
            x = nx.relu(nx.conv2d(x, p[f"block{i}.conv1.k"], p[f"block{i}.conv1.b"]))
            x = nx.upsample2x(x)
        # targets are min-max scaled to [0, 1]
        return nx.sigmoid(nx.conv2d(x, p["out.k"], p["out.b"]))


class Classifier(Module):
    def __init__(self, num_classes: int, latent_dim: int, hidden: int, rng):
        super().__init__()
        self.in_width = num_classes + latent_dim
        self.num_classes, self.latent_dim = num_classes, latent_dim
        widths = (hidden, num_classes) if hidden else (num_classes,)
        fin = self.in_width
        for i, width in enumerate(widths):
            _dense_params(self, f"fc{i}", rng, fin, width)
            fin = width
        self.depth = len(widths)

    def __call__(self, m, z) -> nx.Tensor:
        m, z = nx.as_tensor(m), nx.as_tensor(z)
        if m.ndim != 2 or z.ndim != 2 or m.shape[1] != self.num_classes or z.shape[1] != self.latent_dim:
            raise DimensionError(
                f"classifier expects widths ({self.num_classes}, {self.latent_dim}), got {m.shape} and {z.shape}"
            )
        x = nx.concat([m, z], axis=1)
        p = self._params
        for i in range(self.depth):
            x = nx.dense(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
            if i < self.depth - 1:
                x = nx.relu(x)
        return x


class ImpactxModel:
    def __init__(self, spec: ImpactxSpec, seed: int = 0):
        rng = nx.make_rng(seed)
        self.spec = spec
        bb = spec.backbone
        self.m = ConvNet(bb, rng, bb.hidden + (bb.num_classes,))
        self.lep = ConvNet(bb, rng, (spec.latent_dim,), head="sigmoid")
        self.decoder = Decoder(spec, rng)
        self.classifier = Classifier(bb.num_classes, spec.latent_dim, spec.classifier_hidden, rng)
        self.frozen: set[str] = set()
        self.trained = False

    @property
    def num_classes(self) -> int:
        return self.spec.backbone.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.backbone.input_shape

    def subnet(self, name: str) -> Module:
        if name not in SUBNETS:
            raise KeyError(name)
        return getattr(self, name)

    def freeze(self, name: str) -> None:
        self.subnet(name).set_trainable(False)
        self.frozen.add(name)

    def unfreeze(self, name: str) -> None:
        self.subnet(name).set_trainable(True)
        self.frozen.discard(name)

    def trainable_parameters(self, names=SUBNETS) -> list[nx.Parameter]:
        return [p for n in names if n not in self.frozen for p in self.subnet(n).parameters()]

    def zero_grad(self) -> None:
        for n in SUBNETS:
            for p in self.subnet(n).parameters():
                p.zero_grad()

    def num_parameters(self) -> int:
        return sum(self.subnet(n).num_parameters() for n in SUBNETS)

    # -- forward passes --------------------------------------------------

    def forward_m(self, x) -> nx.Tensor:
        return self.m(x)

    def forward_lep(self, x) -> nx.Tensor:
        return self.lep(x)

    def forward_decoder(self, z) -> nx.Tensor:
        return self.decoder(z)

    def forward_classifier(self, m, z) -> nx.Tensor:
        return self.classifier(m, z)

    def forward(self, x) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
        """(fused logits, baseline scores m, reconstructed map)."""
        m = self.m(x)
        z = self.lep(x)
        return self.classifier(m, z), m, self.decoder(z)

    # -- batched inference helpers (no tape) -----------------------------

    def baseline_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return _batched(lambda b: nx.softmax_array(self.m(b).data), x, batch_size)

    def impactx_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        def run(b):
            return nx.softmax_array(self.classifier(self.m(b), self.lep(b)).data)

        return _batched(run, x, batch_size)


def _batched(fn, x: np.ndarray, batch_size: int) -> np.ndarray:
    x = np.asarray(x, dtype=nx.DEFAULT_DTYPE)
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def argmax_softmax(scores: np.ndarray) -> np.ndarray:
    """argmax of softmax, ties resolved to the lowest class index.

    softmax is strictly monotone, so the argmax is taken on the scores
    themselves; rounding in the probabilities could otherwise merge
    nearly equal classes.
    """
    return np.argmax(np.asarray(scores), axis=-1)


def predict_baseline(model: ImpactxModel, x) -> np.ndarray:
    return argmax_softmax(model.forward_m(x).data)


def predict_impactx(model: ImpactxModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Fused class prediction plus the decoder's attribution map.

    One forward of each of M, LEP, D and C; no explainer involved.
    """
    if not model.trained:
        raise StateError("predict_impactx needs a model whose second stage has completed")
    logits, _, maps = model.forward(x)
    return argmax_softmax(logits.data), maps.data


# -- checkpoint container -----------------------------------------------------

MAGIC = b"IMPX"
VERSION = 1


def save_checkpoint(path, model: ImpactxModel, subnets=SUBNETS) -> None:
    """Write the named sub-networks; little-endian, float32 payloads."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(subnets))]
    for name in subnets:
        params = model.subnet(name).parameters()
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(params)))
        for p in params:
            chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(chunks))


def load_checkpoint(path, model: ImpactxModel) -> list[str]:
    """Load parameters into ``model`` in place; returns the sub-network names read."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    reader = _Reader(buf, 4, path)
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    names = []
    for _ in range(count):
        (nlen,) = reader.unpack("<I")
        name = reader.take(nlen).decode("utf-8")
        if name not in SUBNETS:
            raise FormatError(f"{path}: unknown sub-network {name!r}")
        (nparams,) = reader.unpack("<I")
        params = model.subnet(name).parameters()
        if nparams != len(params):
            raise FormatError(f"{path}: {name} has {nparams} parameters, model expects {len(params)}")
        for p in params:
            (ndim,) = reader.unpack("<I")
            shape = reader.unpack(f"<{ndim}I")
            if tuple(shape) != p.data.shape:
                raise FormatError(f"{path}: {name} shape {shape} != {p.data.shape}")
            raw = reader.take(4 * int(np.prod(shape, dtype=np.int64)))
            p.data[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        names.append(name)
    if reader.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - reader.pos} trailing bytes")
    model.trained = set(names) == set(SUBNETS)
    return names


class _Reader:
    def __init__(self, buf: bytes, pos: int, path):
        self.buf, self.pos, self.path = buf, pos, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte offset {self.pos} (wanted {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
