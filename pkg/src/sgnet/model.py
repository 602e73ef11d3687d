"""Stepwise goal-driven recurrent encoder/decoder.

At every observed step the encoder hidden state drives a goal estimator that
proposes one coarse goal per future step. An attention pooling of all goals
feeds the next encoder step. Attention over the not-yet-reached suffix of
goals feeds each decoder step. A conditional VAE (or, in deterministic
mode, a single non-linear embedding) initialises the decoder.

Arrays are batched: observations are ``(B, obs_len, input_dim)`` and targets
``(B, pred_len, output_dim)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import GruParams, LinearParams

SGE_VARIANTS = ("recurrent", "feedforward", "convolutional")
MODES = ("stochastic", "deterministic")
ABLATIONS = ("ED", "E", "D")
OUTPUT_ACTIVATIONS = ("identity", "faithful-relu")


class ConfigError(ValueError):
    """A configuration field failed validation; message names the field."""


class ModeError(RuntimeError):
    """An operation was invoked in a mode where it is not defined."""


@dataclass
class ModelConfig:
    input_dim: int = 2
    output_dim: int = 2
    enc_hidden: int = 512
    dec_hidden: int = 512
    goal_hidden: int = 128
    latent_dim: int = 32
    obs_len: int = 8
    pred_len: int = 12
    k: int = 20
    sge_variant: str = "recurrent"
    mode: str = "stochastic"
    ablation: str = "ED"
    output_activation: str = "identity"
    # trailing input columns embedded by their own layer (e.g. optical flow)
    aux_dim: int = 0
    # width of each input-group embedding; 0 means enc_hidden
    embed_dim: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("input_dim", "output_dim", "enc_hidden", "dec_hidden", "goal_hidden",
                     "latent_dim", "obs_len", "pred_len", "k"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"model.{name}: must be an integer >= 1, got {value!r}")
        if self.sge_variant not in SGE_VARIANTS:
            raise ConfigError(f"model.sge_variant: unknown variant {self.sge_variant!r}, expected one of {SGE_VARIANTS}")
        if self.mode not in MODES:
            raise ConfigError(f"model.mode: expected one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"model.ablation: expected one of {ABLATIONS}, got {self.ablation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"model.output_activation: expected one of {OUTPUT_ACTIVATIONS}")
        if not 0 <= self.aux_dim < self.input_dim:
            raise ConfigError("model.aux_dim: must satisfy 0 <= aux_dim < input_dim")
        if self.embed_dim < 0:
            raise ConfigError("model.embed_dim: must be >= 0")
        if self.mode == "deterministic":
            self.k = 1

    @property
    def embed_width(self) -> int:
        return self.embed_dim or self.enc_hidden

    @property
    def encoder_input_width(self) -> int:
        groups = 2 if self.aux_dim else 1
        return groups * self.embed_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class LatentGaussian:
    """Diagonal Gaussian stored as mean and log-variance."""

    mu: Tensor
    logvar: Tensor

    @classmethod
    def from_sigma(cls, mu, sigma) -> "LatentGaussian":
        sigma = np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma)
        if np.any(sigma <= 0) or not np.isfinite(sigma).all():
            raise ag.NumericError("standard deviations must be positive and finite")
        return cls(ag.as_tensor(mu), Tensor(2.0 * np.log(sigma), dtype=ag.as_tensor(mu).dtype))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar.data)


@dataclass
class GoalSequence:
    hiddens: Tensor  # (B, pred_len, goal_hidden)
    positions: Tensor  # (B, pred_len, output_dim)


@dataclass
class PredictionSet:
    """Outputs of one encoder step."""

    trajectories: Tensor | None  # (B, K, pred_len, output_dim); None if not decoded
    goal_positions: Tensor  # (B, pred_len, output_dim)
    enc_attention: Tensor  # (B, pred_len)
    dec_attention: Tensor | None  # (B, pred_len, pred_len), row i attends goals i..end
    encoder_hidden: Tensor  # (B, enc_hidden)
    posterior: LatentGaussian | None = None
    prior: LatentGaussian | None = None
    step: int = 0


@dataclass
class ForwardHooks:
    """Test hooks applied to goal hiddens before each aggregator consumes them."""

    encoder_goals: Callable[[Tensor], Tensor] | None = None
    decoder_goals: Callable[[Tensor], Tensor] | None = None


def _conv_index(length: int, kernel: int, stride: int, pad: int, out_len: int) -> np.ndarray:
    # index `length` points at an appended zero row
    t = np.arange(out_len)[:, None] * stride + np.arange(kernel)[None, :] - pad
    return np.where((t >= 0) & (t < length), t, length)


def conv1d(x: Tensor, p: LinearParams, kernel: int, stride: int, pad: int) -> Tensor:
    """Temporal convolution of ``(B, L, C)`` with weights flattened as ``(kernel*C, C_out)``."""
    B, L, C = x.shape
    out_len = (L + 2 * pad - kernel) // stride + 1
    ext = ag.concat([x, ag.zeros((B, 1, C), dtype=x.dtype)], axis=1)
    cols = ag.take(ext, _conv_index(L, kernel, stride, pad, out_len), axis=1)
    return p(cols.reshape(B, out_len, kernel * C))


def conv_transpose1d(x: Tensor, p: LinearParams, kernel: int, stride: int, pad: int, output_pad: int) -> Tensor:
    """Transposed convolution as zero insertion followed by a unit-stride convolution.

    Output length is ``(L - 1) * stride - 2 * pad + kernel + output_pad``.
    """
    B, L, C = x.shape
    dilated = (L - 1) * stride + 1
    edge = kernel - 1 - pad
    total = dilated + 2 * edge + output_pad
    pos = np.arange(total) - edge
    src = np.where((pos >= 0) & (pos < dilated) & (pos % stride == 0), pos // stride, L)
    ext = ag.concat([x, ag.zeros((B, 1, C), dtype=x.dtype)], axis=1)
    expanded = ag.take(ext, src, axis=1)
    return conv1d(expanded, p, kernel, 1, 0)


class SGNet:
    """Parameters plus the forward computation."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        dtype = dtype or ag.default_dtype()
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        c = config
        G, E, Dh, Z, d = c.goal_hidden, c.enc_hidden, c.dec_hidden, c.latent_dim, c.output_dim
        lin = lambda i, o: LinearParams.init(rng, i, o, dtype)  # noqa: E731
        gru = lambda i, o: GruParams.init(rng, i, o, dtype)  # noqa: E731

        self.embed_traj = lin(c.input_dim - c.aux_dim, c.embed_width)
        self.embed_aux = lin(c.aux_dim, c.embed_width) if c.aux_dim else None
        self.encoder = gru(c.encoder_input_width + G, E)
        self.sge_init = lin(E, G)
        if c.sge_variant == "recurrent":
            self.sge_cell = gru(G, G)
            self.sge_input = lin(G, G)
        elif c.sge_variant == "feedforward":
            self.sge_out = lin(G, c.pred_len * G)
        else:
            self.sge_seed = lin(G, c.pred_len * G)
            self.sge_convs = [lin(3 * G, G) for _ in range(4)]
        self.attn_enc = lin(G, 1)
        self.attn_dec = lin(G, 1)
        self.goal_reg = lin(G, d)
        if c.mode == "stochastic":
            self.target_encoder = gru(d, G)
            self.recognition = lin(E + G, 2 * Z)
            self.prior_net = lin(E, 2 * Z)
            self.generation = lin(E + Z, Dh)
        else:
            self.det_embed = lin(E, Dh)
        self.dec_input = lin(Dh, G)
        self.decoder = gru(2 * G, Dh)
        self.traj_reg = lin(Dh, d)

    # ------------------------------------------------------------------
    # parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, p):
            for name, t in p.named(prefix):
                out[name] = t

        put("embed_traj", self.embed_traj)
        if self.embed_aux is not None:
            put("embed_aux", self.embed_aux)
        put("encoder", self.encoder)
        put("sge_init", self.sge_init)
        v = self.config.sge_variant
        if v == "recurrent":
            put("sge_cell", self.sge_cell)
            put("sge_input", self.sge_input)
        elif v == "feedforward":
            put("sge_out", self.sge_out)
        else:
            put("sge_seed", self.sge_seed)
            for i, p in enumerate(self.sge_convs):
                put(f"sge_conv{i}", p)
        put("attn_enc", self.attn_enc)
        put("attn_dec", self.attn_dec)
        put("goal_reg", self.goal_reg)
        if self.config.mode == "stochastic":
            put("target_encoder", self.target_encoder)
            put("recognition", self.recognition)
            put("prior_net", self.prior_net)
            put("generation", self.generation)
        else:
            put("det_embed", self.det_embed)
        put("dec_input", self.dec_input)
        put("decoder", self.decoder)
        put("traj_reg", self.traj_reg)
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ag.ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=self.dtype)

    # ------------------------------------------------------------------
    # components

    def _out_act(self, y: Tensor) -> Tensor:
        return ag.relu(y) if self.config.output_activation == "faithful-relu" else y

    def embed_input(self, x) -> Tensor:
        """Rectified affine embedding per input group, concatenated."""
        x = ag.as_tensor(x, self.dtype)
        a = self.config.aux_dim
        if not a:
            return ag.relu(self.embed_traj(x))
        main = x[..., : x.shape[-1] - a]
        aux = x[..., x.shape[-1] - a :]
        return ag.concat([ag.relu(self.embed_traj(main)), ag.relu(self.embed_aux(aux))], axis=-1)

    def encoder_step(self, x_embed: Tensor, goal_input: Tensor, h: Tensor) -> Tensor:
        if self.config.ablation == "D":
            goal_input = ag.zeros(goal_input.shape, dtype=self.dtype)
        return self.encoder(ag.concat([x_embed, goal_input], axis=-1), h)

    def sge_forward(self, h_enc: Tensor) -> GoalSequence:
        c = self.config
        B, G, L = h_enc.shape[0], c.goal_hidden, c.pred_len
        seed = ag.relu(self.sge_init(h_enc))
        if c.sge_variant == "recurrent":
            h = seed
            x = ag.zeros((B, G), dtype=self.dtype)
            hiddens = []
            for _ in range(L):
                h = self.sge_cell(x, h)
                hiddens.append(h)
                x = ag.relu(self.sge_input(h))
            goals = ag.stack(hiddens, axis=1)
        elif c.sge_variant == "feedforward":
            goals = self.sge_out(seed).reshape(B, L, G)
        else:
            seq = self.sge_seed(seed).reshape(B, L, G)
            c0, c1, d0, d1 = self.sge_convs
            seq = ag.relu(conv1d(seq, c0, 3, 2, 1))
            seq = ag.relu(conv1d(seq, c1, 3, 2, 1))
            seq = ag.relu(conv_transpose1d(seq, d0, 3, 2, 1, 1))
            seq = conv_transpose1d(seq, d1, 3, 2, 1, 1)
            goals = seq[:, :L]
        return GoalSequence(goals, self.regress_goal_positions(goals))

    def regress_goal_positions(self, goals: Tensor) -> Tensor:
        return self._out_act(self.goal_reg(goals))

    def aggregate_goals_encoder(self, goals: Tensor) -> tuple[Tensor, Tensor]:
        """Attention-pool all goals: returns ``(B, G)`` features and ``(B, L)`` weights."""
        B, L, G = goals.shape
        scores = self.attn_enc(ag.tanh(goals)).reshape(B, L)
        weights = ag.softmax(scores)
        pooled = ag.matmul(weights.reshape(B, 1, L), goals).reshape(B, G)
        return pooled, weights

    def aggregate_goals_decoder(self, goals: Tensor, step: int) -> tuple[Tensor, Tensor]:
        """Attention-pool goals ``step..L`` (1-based step) for one decoder step."""
        B, L, G = goals.shape
        if not 1 <= step <= L:
            raise ValueError(f"decoder step {step} outside 1..{L}")
        suffix = goals[:, step - 1 :]
        n = L - step + 1
        scores = self.attn_dec(ag.tanh(suffix)).reshape(B, n)
        weights = ag.softmax(scores)
        pooled = ag.matmul(weights.reshape(B, 1, n), suffix).reshape(B, G)
        if self.config.ablation == "E":
            pooled = ag.zeros((B, G), dtype=self.dtype)
        return pooled, weights

    def decoder_goal_inputs(self, goals: Tensor) -> tuple[Tensor, Tensor]:
        """All decoder-step goal inputs at once via a triangular attention mask.

        Row ``i`` of the returned ``(B, L, L)`` weights is zero before column ``i``.
        """
        B, L, G = goals.shape
        scores = self.attn_dec(ag.tanh(goals)).reshape(B, 1, L)
        rows = scores + np.zeros((1, L, 1), dtype=self.dtype)
        mask = np.triu(np.ones((L, L), dtype=bool))
        weights = ag.softmax(rows, mask=mask)
        pooled = ag.matmul(weights, goals)
        if self.config.ablation == "E":
            pooled = ag.zeros((B, L, G), dtype=self.dtype)
        return pooled, weights

    def encode_target(self, future) -> Tensor:
        future = ag.as_tensor(future, self.dtype)
        B, L, _ = future.shape
        h = ag.zeros((B, self.config.goal_hidden), dtype=self.dtype)
        for i in range(L):
            h = self.target_encoder(future[:, i], h)
        return h

    def _split_gaussian(self, out: Tensor) -> LatentGaussian:
        Z = self.config.latent_dim
        return LatentGaussian(out[:, :Z], out[:, Z:])

    def cvae_recognize(self, h_enc: Tensor, h_target: Tensor | None) -> LatentGaussian:
        if self.config.mode != "stochastic":
            raise ModeError("recognition network exists only in stochastic mode")
        if h_target is None:
            raise ModeError("recognition needs the future trajectory; it is a training-only path")
        return self._split_gaussian(self.recognition(ag.concat([h_enc, h_target], axis=-1)))

    def cvae_prior(self, h_enc: Tensor) -> LatentGaussian:
        if self.config.mode != "stochastic":
            raise ModeError("prior network exists only in stochastic mode")
        return self._split_gaussian(self.prior_net(h_enc))

    @staticmethod
    def sample_latent(dist: LatentGaussian, noise) -> Tensor:
        """Reparameterised draws ``mu + sigma * eps`` for ``noise`` of shape ``(B, K, Z)``."""
        noise = np.asarray(noise, dtype=dist.mu.dtype)
        B, Z = dist.mu.shape
        if noise.ndim != 3 or noise.shape[0] != B or noise.shape[2] != Z:
            raise ag.ShapeError(f"noise shape {noise.shape} does not match latent ({B}, K, {Z})")
        sigma = ag.exp(dist.logvar * 0.5).reshape(B, 1, Z)
        return dist.mu.reshape(B, 1, Z) + sigma * noise

    def cvae_generate(self, h_enc: Tensor, z: Tensor | None) -> Tensor:
        """Initial decoder hiddens, ``(B*K, dec_hidden)`` ordered window-major."""
        if self.config.mode == "deterministic":
            return ag.relu(self.det_embed(h_enc))
        B, K, Z = z.shape
        h_rep = ag.repeat(h_enc, K, axis=0)
        return ag.relu(self.generation(ag.concat([h_rep, z.reshape(B * K, Z)], axis=-1)))

    def decoder_step(self, h_dec: Tensor, goal_input: Tensor) -> tuple[Tensor, Tensor]:
        x = ag.relu(self.dec_input(h_dec))
        h_new = self.decoder(ag.concat([x, goal_input], axis=-1), h_dec)
        return h_new, self._out_act(self.traj_reg(h_new))

    def decode(self, h_dec: Tensor, goal_inputs: Tensor, k: int) -> Tensor:
        """Roll the decoder for every proposal; returns ``(B, K, L, d)``."""
        B, L, G = goal_inputs.shape
        tiled = ag.repeat(goal_inputs, k, axis=0) if k > 1 else goal_inputs
        hiddens = []
        h = h_dec
        for i in range(L):
            x = ag.relu(self.dec_input(h))
            h = self.decoder(ag.concat([x, tiled[:, i]], axis=-1), h)
            hiddens.append(h)
        traj = self._out_act(self.traj_reg(ag.stack(hiddens, axis=1)))
        return traj.reshape(B, k, L, self.config.output_dim)

    # ------------------------------------------------------------------
    # full pass

    def forward(
        self,
        observed,
        targets=None,
        *,
        train: bool = False,
        noise=None,
        rng: np.random.Generator | None = None,
        decode_last_only: bool = False,
        hooks: ForwardHooks | None = None,
        k: int | None = None,
    ) -> list[PredictionSet]:
        """Run every encoder step on a batch.

        ``observed`` is ``(B, obs_len, input_dim)``. In training mode
        ``targets`` is ``(B, obs_len, pred_len, output_dim)``: the future seen
        from each encoder step. ``noise`` is ``(n_decoded_steps, B, K, Z)``;
        when omitted it is drawn from ``rng``. ``k`` overrides the configured
        proposal count (ignored in deterministic mode).
        """
        c = self.config
        k = 1 if c.mode == "deterministic" else (k or c.k)
        x = ag.as_tensor(observed, self.dtype)
        if x.ndim != 3 or x.shape[1] != c.obs_len or x.shape[2] != c.input_dim:
            raise ag.ShapeError(
                f"observations {x.shape} do not match (B, {c.obs_len}, {c.input_dim})")
        B = x.shape[0]
        stochastic = c.mode == "stochastic"
        if train and stochastic and targets is None:
            raise ModeError("training in stochastic mode needs targets for the recognition network")
        if targets is not None:
            targets = np.asarray(targets, dtype=self.dtype)
        hooks = hooks or ForwardHooks()
        decode_at = [c.obs_len - 1] if decode_last_only else list(range(c.obs_len))
        if stochastic and noise is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = rng.standard_normal((len(decode_at), B, k, c.latent_dim))

        embedded = self.embed_input(x)
        h = ag.zeros((B, c.enc_hidden), dtype=self.dtype)
        goal_in = ag.zeros((B, c.goal_hidden), dtype=self.dtype)
        outputs = []
        for t in range(c.obs_len):
            h = self.encoder_step(embedded[:, t], goal_in, h)
            goals = self.sge_forward(h)
            enc_goals = hooks.encoder_goals(goals.hiddens) if hooks.encoder_goals else goals.hiddens
            goal_in, w_enc = self.aggregate_goals_encoder(enc_goals)
            out = PredictionSet(None, goals.positions, w_enc, None, h, step=t)
            if t in decode_at:
                dec_goals = hooks.decoder_goals(goals.hiddens) if hooks.decoder_goals else goals.hiddens
                goal_inputs, w_dec = self.decoder_goal_inputs(dec_goals)
                out.dec_attention = w_dec
                if stochastic:
                    prior = self.cvae_prior(h)
                    out.prior = prior
                    if train:
                        post = self.cvae_recognize(h, self.encode_target(targets[:, t]))
                        out.posterior = post
                        source = post
                    else:
                        source = prior
                    z = self.sample_latent(source, noise[decode_at.index(t)])
                    h_dec = self.cvae_generate(h, z)
                else:
                    h_dec = self.cvae_generate(h, None)
                out.trajectories = self.decode(h_dec, goal_inputs, k)
            outputs.append(out)
        return outputs

    def forward_window(self, window, *, train=False, seed: int = 0, decode_last_only=False):
        """Single-window convenience wrapper around :meth:`forward`."""
        targets = window.step_targets()[None] if train else None
        rng = np.random.default_rng(seed)
        return self.forward(window.X[None], targets, train=train, rng=rng,
                            decode_last_only=decode_last_only)


def latent_noise(seed: int, index: int, k: int, latent_dim: int, steps: int = 1) -> np.ndarray:
    """Per-window standard normal stream, independent of batching."""
    rng = np.random.default_rng([seed, index])
    return rng.standard_normal((steps, k, latent_dim))

