"""Networks: polarization encoder, conditional denoiser and the frozen
feature extractor used by the perceptual term and the Fréchet distance."""
import hashlib
import math

import numpy as np

from rbdm import tensor as tn
from rbdm.bridge import make_schedule
from rbdm.errors import ShapeError
from rbdm.tensor import Tensor, no_grad

MUELLER_CHANNELS = 16
STAIN_CHANNELS = 3
FEATURE_SEED = 20240607


def _conv_init(rng, cout, cin, k, dtype):
    std = math.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)


def _linear_init(rng, cout, cin, dtype):
    std = math.sqrt(2.0 / cin)
    return rng.normal(0.0, std, size=(cout, cin)).astype(dtype)


def _param(arr, name):
    return Tensor(arr, requires_grad=True, name=name)


class PolarizationEncoder:
    """Two 3x3 convolutions 16 -> hidden -> 3 with a SiLU between and tanh
    on the output, mapping a Mueller patch into the stain image range."""

    def __init__(self, rng, hidden=64, dtype=np.float32):
        self.params = {
            "encoder.conv1.weight": _param(_conv_init(rng, hidden, MUELLER_CHANNELS, 3, dtype),
                                           "encoder.conv1.weight"),
            "encoder.conv1.bias": _param(np.zeros(hidden, dtype), "encoder.conv1.bias"),
            "encoder.conv2.weight": _param(_conv_init(rng, STAIN_CHANNELS, hidden, 3, dtype),
                                           "encoder.conv2.weight"),
            "encoder.conv2.bias": _param(np.zeros(STAIN_CHANNELS, dtype), "encoder.conv2.bias"),
        }

    def __call__(self, y0):
        y0 = tn.as_tensor(y0)
        if y0.ndim not in (3, 4) or y0.shape[-3] != MUELLER_CHANNELS:
            raise ShapeError(f"encoder expects {MUELLER_CHANNELS} Mueller channels on axis -3, "
                             f"got shape {y0.shape}")
        p = self.params
        h = tn.silu(tn.conv2d(y0, p["encoder.conv1.weight"], p["encoder.conv1.bias"], padding=1))
        return tn.tanh(tn.conv2d(h, p["encoder.conv2.weight"], p["encoder.conv2.bias"], padding=1))


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer steps; returns (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser:
    """Three-level U-shaped convnet predicting the bridge residual from
    x_t and the encoded condition ybar0 (channel-concatenated).

    The step embedding goes through a two-layer perceptron and is added
    (after a per-stage projection) to the first convolution of every stage.
    SiLU activations throughout keep the loss smooth in the weights.
    """

    STAGES = ("down1", "down2", "mid", "up2", "up1")

    def __init__(self, rng, channels=(32, 64, 128), emb_dim=64, dtype=np.float32):
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        self.dtype = dtype
        convs = {
            "down1.conv1": (c1, 2 * STAIN_CHANNELS),
            "down1.conv2": (c1, c1),
            "down2.conv1": (c2, c1),
            "down2.conv2": (c2, c2),
            "mid.conv1": (c3, c2),
            "mid.conv2": (c3, c3),
            "up2.conv1": (c2, c3 + c2),
            "up2.conv2": (c2, c2),
            "up1.conv1": (c1, c2 + c1),
            "up1.conv2": (c1, c1),
            "out": (STAIN_CHANNELS, c1),
        }
        stage_width = {"down1": c1, "down2": c2, "mid": c3, "up2": c2, "up1": c1}
        p = {}
        for name, (cout, cin) in convs.items():
            p[f"denoiser.{name}.weight"] = _conv_init(rng, cout, cin, 3, dtype)
            p[f"denoiser.{name}.bias"] = np.zeros(cout, dtype)
        p["denoiser.time.fc1.weight"] = _linear_init(rng, emb_dim, emb_dim, dtype)
        p["denoiser.time.fc1.bias"] = np.zeros(emb_dim, dtype)
        p["denoiser.time.fc2.weight"] = _linear_init(rng, emb_dim, emb_dim, dtype)
        p["denoiser.time.fc2.bias"] = np.zeros(emb_dim, dtype)
        for stage in self.STAGES:
            p[f"denoiser.time.{stage}.weight"] = _linear_init(rng, stage_width[stage], emb_dim, dtype)
            p[f"denoiser.time.{stage}.bias"] = np.zeros(stage_width[stage], dtype)
        self.params = {k: _param(v, k) for k, v in p.items()}

    def _conv(self, x, name, stage_emb=None):
        p = self.params
        h = tn.conv2d(x, p[f"denoiser.{name}.weight"], p[f"denoiser.{name}.bias"], padding=1)
        if stage_emb is not None:
            h = tn.bias_add(h, stage_emb)
        return tn.silu(h)

    def __call__(self, x_t, ybar0, t):
        x_t, ybar0 = tn.as_tensor(x_t), tn.as_tensor(ybar0)
        if x_t.shape != ybar0.shape or x_t.ndim != 4 or x_t.shape[1] != STAIN_CHANNELS:
            raise ShapeError(f"denoiser expects matching N x 3 x H x W inputs, got "
                             f"{x_t.shape} and {ybar0.shape}")
        h, w = x_t.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"denoiser needs spatial size divisible by 4, got {h}x{w}")
        t = np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],))
        p = self.params
        emb = Tensor(timestep_embedding(t, self.emb_dim).astype(x_t.dtype))
        emb = tn.silu(tn.linear(emb, p["denoiser.time.fc1.weight"], p["denoiser.time.fc1.bias"]))
        emb = tn.silu(tn.linear(emb, p["denoiser.time.fc2.weight"], p["denoiser.time.fc2.bias"]))

        def stage(name):
            return tn.linear(emb, p[f"denoiser.time.{name}.weight"], p[f"denoiser.time.{name}.bias"])

        x = tn.concat([x_t, ybar0], axis=1)
        h1 = self._conv(self._conv(x, "down1.conv1", stage("down1")), "down1.conv2")
        h2 = self._conv(self._conv(tn.avg_pool2d(h1), "down2.conv1", stage("down2")), "down2.conv2")
        h3 = self._conv(self._conv(tn.avg_pool2d(h2), "mid.conv1", stage("mid")), "mid.conv2")
        u2 = tn.concat([tn.upsample2d(h3), h2], axis=1)
        u2 = self._conv(self._conv(u2, "up2.conv1", stage("up2")), "up2.conv2")
        u1 = tn.concat([tn.upsample2d(u2), h1], axis=1)
        u1 = self._conv(self._conv(u1, "up1.conv1", stage("up1")), "up1.conv2")
        return tn.conv2d(u1, p["denoiser.out.weight"], p["denoiser.out.bias"], padding=1)


class FeatureExtractor:
    """Three frozen conv -> relu -> 2x2 average pool stages with weights drawn
    from a fixed seed. Never trained; gradients flow through its input only."""

    def __init__(self, channels=(8, 16, 32), seed=FEATURE_SEED, dtype=np.float32):
        rng = np.random.default_rng(seed)
        widths = (STAIN_CHANNELS,) + tuple(channels)
        self.channels = tuple(channels)
        self.weights = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = Tensor(_conv_init(rng, cout, cin, 3, dtype))
            b = Tensor(rng.normal(0.0, 0.1, size=cout).astype(dtype))
            self.weights.append((w, b))

    @property
    def feature_dim(self):
        return sum(self.channels)

    def __call__(self, x):
        """Return the three stage outputs for an image or batch."""
        feats = []
        h = tn.as_tensor(x)
        for w, b in self.weights:
            if h.dtype != w.dtype:
                w, b = Tensor(w.data.astype(h.dtype)), Tensor(b.data.astype(h.dtype))
            h = tn.avg_pool2d(tn.relu(tn.conv2d(h, w, b, padding=1)))
            feats.append(h)
        return feats

    def pooled_features(self, images, chunk=32):
        """(N, sum(channels)) spatial means of every stage, for set statistics."""
        images = np.asarray(images, dtype=self.weights[0][0].dtype)
        if images.ndim == 3:
            images = images[None]
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                stages = self(images[i:i + chunk])
                out.append(np.concatenate([s.data.mean(axis=(2, 3)) for s in stages], axis=1))
        return np.concatenate(out, axis=0).astype(np.float64)

    def checksum(self):
        h = hashlib.sha256()
        for w, b in self.weights:
            h.update(w.data.tobytes())
            h.update(b.data.tobytes())
        return h.hexdigest()


class RBDM:
    """Encoder + denoiser + frozen extractor sharing one noise schedule."""

    def __init__(self, T, channels=(32, 64, 128), encoder_hidden=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.schedule = make_schedule(T)
        self.dtype = dtype
        self.encoder = PolarizationEncoder(rng, encoder_hidden, dtype)
        self.denoiser = Denoiser(rng, channels, dtype=dtype)
        self.features = FeatureExtractor(dtype=dtype)

    @property
    def T(self):
        return self.schedule.T

    @property
    def params(self):
        return {**self.encoder.params, **self.denoiser.params}

    def load_state(self, arrays):
        params = self.params
        missing = set(params) - set(arrays)
        if missing:
            raise ShapeError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    # numpy-level interface used by the sampler
    def encode(self, y0):
        with no_grad():
            return self.encoder(np.asarray(y0, dtype=self.dtype)).data

    def predict_eps(self, x_t, ybar0, t):
        x_t = np.asarray(x_t, dtype=self.dtype)
        ybar0 = np.asarray(ybar0, dtype=self.dtype)
        single = x_t.ndim == 3
        if single:
            x_t, ybar0 = x_t[None], ybar0[None]
        with no_grad():
            out = self.denoiser(x_t, ybar0, t).data
        return out[0] if single else out
