"""Classifier and critic networks, losses, and the checkpoint format."""

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from advcritic import autodiff as ad

ARCHITECTURES = ("mlp", "lenet5")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class ParamSet:
    """Ordered named parameters plus the tag of the architecture they belong to."""

    def __init__(self, tag, k, seed, params=None):
        self.tag = tag
        self.k = int(k)
        self.seed = seed
        self._params = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        self._params[name] = ad.parameter(value)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def nodes(self):
        return list(self._params.values())

    def arrays(self):
        return OrderedDict((n, p.value) for n, p in self._params.items())

    def assign(self, name, value):
        value = np.asarray(value, dtype=ad.DTYPE)
        if value.shape != self._params[name].shape:
            raise ad.ShapeError(f"{name}: {value.shape} != {self._params[name].shape}")
        # a fresh array keeps graphs built on the old value intact
        self._params[name].value = value.copy()

    def count(self):
        return int(sum(p.value.size for p in self._params.values()))

    def copy(self):
        return ParamSet(self.tag, self.k, self.seed, self.arrays())


def _parse_tag(tag):
    head, *fields = tag.split(";")
    out = {"kind": head}
    for f in fields:
        key, _, val = f.partition("=")
        out[key] = val
    return out


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t)


@dataclass(frozen=True)
class ClassifierSpec:
    architecture: str = "mlp"
    input_shape: tuple = (28, 28)
    k: int = 10
    hidden: tuple = (1200, 1200, 1200)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unsupported architecture {self.architecture!r}")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.architecture == "lenet5" and tuple(self.input_shape) not in ((28, 28), (1, 28, 28)):
            raise ValueError("lenet5 expects 28x28 single-channel input")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))

    def tag(self):
        dims = ",".join(map(str, self.input_shape))
        if self.architecture == "lenet5":
            return f"lenet5;in={dims};k={self.k}"
        return f"mlp;in={dims};hidden={','.join(map(str, self.hidden))};k={self.k}"

    @classmethod
    def from_tag(cls, tag):
        t = _parse_tag(tag)
        if t["kind"] not in ARCHITECTURES:
            raise ArchitectureMismatchError(f"{tag!r} is not a classifier tag")
        kw = {"architecture": t["kind"], "input_shape": _ints(t["in"]), "k": int(t["k"])}
        if "hidden" in t:
            kw["hidden"] = _ints(t["hidden"])
        return cls(**kw)


@dataclass(frozen=True)
class CriticSpec:
    input_shape: tuple = (28, 28)
    k: int = 10
    hidden: tuple = (1200, 1200)
    slope: float = 0.2
    input_noise: float = 0.3
    hidden_noise: float = 0.5

    def __post_init__(self):
        if self.k < 2 or not self.hidden:
            raise ValueError("critic needs k >= 2 and at least one hidden layer")
        if self.input_noise < 0 or self.hidden_noise < 0:
            raise ValueError("noise std must be non-negative")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))

    def tag(self):
        return (
            f"critic;in={','.join(map(str, self.input_shape))};"
            f"hidden={','.join(map(str, self.hidden))};k={self.k};slope={self.slope!r};"
            f"noise={self.input_noise!r},{self.hidden_noise!r}"
        )

    @classmethod
    def from_tag(cls, tag):
        t = _parse_tag(tag)
        if t["kind"] != "critic":
            raise ArchitectureMismatchError(f"{tag!r} is not a critic tag")
        noise_in, noise_hidden = (float(v) for v in t["noise"].split(","))
        return cls(
            input_shape=_ints(t["in"]),
            k=int(t["k"]),
            hidden=_ints(t["hidden"]),
            slope=float(t["slope"]),
            input_noise=noise_in,
            hidden_noise=noise_hidden,
        )


def _he(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _dense(params, name, x):
    return x @ params[name + ".w"] + params[name + ".b"]


class Classifier:
    """k-way classifier f(x; W) producing logits and log-probabilities."""

    def __init__(self, spec, params):
        if params.tag != spec.tag():
            raise ArchitectureMismatchError(f"{params.tag!r} != {spec.tag()!r}")
        self.spec = spec
        self.params = params

    @property
    def k(self):
        return self.spec.k

    def _batch(self, x):
        x = ad.as_node(x)
        shape = self.spec.input_shape
        if x.shape[1:] == shape:
            return x
        if x.value[0].size == self.spec.input_size:
            return ad.reshape(x, (x.shape[0],) + shape)
        raise ad.ShapeError(f"input {x.shape} does not match {shape}")

    def logits(self, x):
        x = self._batch(x)
        p = self.params
        if self.spec.architecture == "mlp":
            h = ad.flatten(x)
            for i in range(len(self.spec.hidden)):
                h = ad.relu(_dense(p, f"fc{i}", h))
            return _dense(p, "out", h)
        h = ad.reshape(x, (x.shape[0], 1, 28, 28))
        h = ad.max_pool2d(ad.relu(ad.conv2d(h, p["conv0.w"], p["conv0.b"])))
        h = ad.max_pool2d(ad.relu(ad.conv2d(h, p["conv1.w"], p["conv1.b"])))
        h = ad.flatten(h)
        h = ad.relu(_dense(p, "fc0", h))
        h = ad.relu(_dense(p, "fc1", h))
        return _dense(p, "out", h)

    def log_probs(self, x):
        return ad.log_softmax(self.logits(x), axis=1)

    def predict_log_probs(self, x):
        with ad.no_grad():
            return self.log_probs(np.asarray(x, dtype=ad.DTYPE)).value

    def predict_probs(self, x):
        return np.exp(self.predict_log_probs(x))

    def predict(self, x):
        return np.argmax(self.predict_log_probs(x), axis=1)


def build_classifier(spec, seed=0):
    rng = np.random.default_rng(seed)
    params = ParamSet(spec.tag(), spec.k, seed)
    if spec.architecture == "mlp":
        sizes = (spec.input_size,) + spec.hidden
        for i in range(len(spec.hidden)):
            params.add(f"fc{i}.w", _he(rng, sizes[i], (sizes[i], sizes[i + 1])))
            params.add(f"fc{i}.b", np.zeros(sizes[i + 1]))
        params.add("out.w", _he(rng, sizes[-1], (sizes[-1], spec.k)))
        params.add("out.b", np.zeros(spec.k))
    else:
        # conv(5x5,6)-pool-conv(5x5,16)-pool-fc(120)-fc(84)-fc(k)
        params.add("conv0.w", _he(rng, 25, (6, 1, 5, 5)))
        params.add("conv0.b", np.zeros(6))
        params.add("conv1.w", _he(rng, 150, (16, 6, 5, 5)))
        params.add("conv1.b", np.zeros(16))
        params.add("fc0.w", _he(rng, 256, (256, 120)))
        params.add("fc0.b", np.zeros(120))
        params.add("fc1.w", _he(rng, 120, (120, 84)))
        params.add("fc1.b", np.zeros(84))
        params.add("out.w", _he(rng, 84, (84, spec.k)))
        params.add("out.b", np.zeros(spec.k))
    return Classifier(spec, params)


class Critic:
    """k-headed discriminator; head j scores "natural example of class j".

    The label only selects the output head. Gaussian noise is added to the
    input of every layer when ``training`` is set.
    """

    def __init__(self, spec, params):
        if params.tag != spec.tag():
            raise ArchitectureMismatchError(f"{params.tag!r} != {spec.tag()!r}")
        self.spec = spec
        self.params = params

    @property
    def k(self):
        return self.spec.k

    def logits(self, x, training=False, rng=None):
        if training and rng is None:
            raise ValueError("training mode needs an rng for the noise layers")
        s = self.spec
        h = ad.flatten(ad.as_node(x))
        if h.shape[1] != s.input_size:
            raise ad.ShapeError(f"critic input {h.shape} does not match {s.input_shape}")
        for i in range(len(s.hidden)):
            if training:
                h = ad.gaussian_noise(h, s.input_noise if i == 0 else s.hidden_noise, rng)
            h = ad.leaky_relu(_dense(self.params, f"fc{i}", h), s.slope)
        if training:
            h = ad.gaussian_noise(h, s.hidden_noise, rng)
        return _dense(self.params, "out", h)

    def scores(self, x, training=False, rng=None):
        return ad.sigmoid(self.logits(x, training, rng))

    def head_logit(self, x, labels, training=False, rng=None):
        return ad.pick(self.logits(x, training, rng), labels)


def build_critic(spec, seed=0):
    rng = np.random.default_rng(seed)
    params = ParamSet(spec.tag(), spec.k, seed)
    sizes = (spec.input_size,) + spec.hidden
    for i in range(len(spec.hidden)):
        params.add(f"fc{i}.w", _he(rng, sizes[i], (sizes[i], sizes[i + 1])))
        params.add(f"fc{i}.b", np.zeros(sizes[i + 1]))
    params.add("out.w", _he(rng, sizes[-1], (sizes[-1], spec.k)))
    params.add("out.b", np.zeros(spec.k))
    return Critic(spec, params)


def nll_loss(log_probs, labels):
    """Mean negative log-likelihood of ``labels`` under (B, k) log-probabilities."""
    log_probs = ad.as_node(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= log_probs.shape[1]):
        raise ValueError("label out of range")
    return -ad.mean(ad.pick(log_probs, labels))


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"ADVCKPT\x00"
VERSION = 1
_NO_SEED = -1


def save_params(params, path):
    """Write ``params`` in the little-endian checkpoint format (see README)."""
    out = bytearray()
    out += MAGIC
    tag = params.tag.encode("utf-8")
    seed = _NO_SEED if params.seed is None else int(params.seed)
    out += struct.pack("<IH", VERSION, len(tag)) + tag
    out += struct.pack("<Iq I", params.k, seed, len(params))
    for name, node in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", node.value.ndim)
        out += struct.pack(f"<{node.value.ndim}Q", *node.value.shape)
        out += np.ascontiguousarray(node.value, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, expected_tag=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("bad magic or truncated header")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptCheckpointError("checksum mismatch (corrupt or truncated file)")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    version, tag_len = r.unpack("<IH")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    tag = r.take(tag_len).decode("utf-8")
    if expected_tag is not None and tag != expected_tag:
        raise ArchitectureMismatchError(f"checkpoint is {tag!r}, expected {expected_tag!r}")
    k, seed, count = r.unpack("<IqI")
    params = ParamSet(tag, k, None if seed == _NO_SEED else seed)
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        params.add(name, data.astype(ad.DTYPE))
    if r.pos != len(r.buf):
        raise CorruptCheckpointError("trailing bytes after last parameter")
    return params


def load_model(path):
    """Rebuild a :class:`Classifier` or :class:`Critic` from a checkpoint."""
    params = load_params(path)
    if params.tag.startswith("critic"):
        return Critic(CriticSpec.from_tag(params.tag), params)
    return Classifier(ClassifierSpec.from_tag(params.tag), params)


@dataclass
class Adam:
    """Adam over a :class:`ParamSet`; ``lr`` may be changed between steps."""

    params: ParamSet
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, node in self.params.items():
            g = grads[name]
            m = self._m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self._v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            self.params.assign(name, node.value - self.lr * mhat / (np.sqrt(vhat) + self.eps))

    def minimize(self, loss):
        """Backpropagate ``loss`` into every parameter and take one step."""
        gm = ad.gradient(loss, self.params.nodes(), create_graph=False)
        self.step({name: gm[node].value for name, node in self.params.items()})
