"""Recurrent autoencoders with an adversarial trajectory-length discriminator.

Architecture (per window ``x_t`` of a ``T x F`` sequence)::

    e_t  = relu(x_t We + be)                       feature embedding
    h_f  = GRU_fwd(e_0 .. e_{T-1}),  h_b = GRU_bwd(e_{T-1} .. e_0)
    z    = [h_f, h_b] Wz + bz                      patient embedding
    s_0  = tanh(z Wd + bd);  s_t = GRU_dec(s_{t-1}, s_{t-1})
    x'_t = sigmoid/identity(s_t Wo + bo)           sigmoid on binary columns
    n'_w = sigmoid(z Wn + bn)                      discriminator

Training alternates, per mini-batch, a discriminator update on ``L_D`` with
the encoder frozen and an autoencoder update on ``L_R - alpha*min(beta, L_D)``
with the discriminator frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .artifacts import write_csv
from .autodiff import Tensor
from .cohort import derive_seed

log = logging.getLogger(__name__)

MODEL_KINDS = ("gru", "agru", "tlstm")
ENCODER, DECODER, DISCRIMINATOR = "encoder", "decoder", "discriminator"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ModelConfig:
    kind: str = "agru"
    feature_embed_dim: int = 256
    hidden_size: int = 128
    n_z: int = 256
    w_b: float = 100.0
    alpha: float = 1.0
    beta: float = 0.01
    lr_ae: float = 2e-3
    lr_disc: float = 2e-4
    weight_decay: float = 1e-6
    batch_size: int = 128
    epochs: int = 50
    train_fraction: float = 0.8
    seed: int = 0
    clip_grad_norm: Optional[float] = None
    gap_scale: float = 1.0 / 22

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "gru":
            self.alpha = 0.0
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def trains_discriminator(self):
        return self.kind != "gru"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# losses

def loss_reconstruction(X, X_rec, window_mask, binary_columns, w_b=100.0):
    """``(L_R, L_bin, L_cont)`` over data windows only.

    Continuous targets below zero (the ``-0.1`` missing-lab mask) are excluded
    from ``L_cont``. Each term averages over its own included elements.
    """
    X = np.asarray(X, dtype=np.float64)
    window_mask = np.asarray(window_mask, dtype=bool)
    binary_columns = np.asarray(binary_columns, dtype=bool)
    if X.shape != X_rec.shape:
        raise ValueError(f"reconstruction shape mismatch: {X.shape} vs {X_rec.shape}")
    rows = window_mask[..., None]
    bin_mask = rows & binary_columns
    cont_mask = rows & ~binary_columns & (X >= 0)
    if not bin_mask.any() and not cont_mask.any():
        raise ValueError("no elements included in the reconstruction loss")
    L_bin = ad.mse(X_rec, X, bin_mask)
    L_cont = ad.mse(X_rec, X, cont_mask)
    return L_bin * w_b + L_cont, L_bin, L_cont


def loss_discriminator(n_w, n_w_pred):
    """Batch mean of ``(n_w - n'_w)^2``."""
    n_w = np.asarray(n_w, dtype=np.float64)
    return ad.mse(n_w_pred, n_w, np.ones(n_w.shape, dtype=bool))


def _exact_difference(total, penalty):
    """``total - penalty``, nudged by ulps so that ``result + penalty == total`` when representable."""
    out = total - penalty
    for _ in range(4):
        back = out + penalty
        if back == total:
            break
        out = math.nextafter(out, -math.inf if back > total else math.inf)
    else:
        out = total - penalty
    return out


def loss_total(L_R, L_D, alpha, beta):
    """``L'_R = L_R - alpha * min(beta, L_D)``; accepts floats or scalar Tensors."""
    if alpha < 0 or beta <= 0:
        raise ValueError("alpha must be >= 0 and beta > 0")
    if not isinstance(L_R, Tensor) and not isinstance(L_D, Tensor):
        penalty = alpha * min(beta, float(L_D))
        return _exact_difference(float(L_R), penalty)
    if alpha == 0:
        return L_R
    capped = ad.minimum(L_D, beta)
    out = L_R - capped * alpha
    # value-only correction; gradients are those of L_R - alpha*min(beta, L_D)
    out.data = np.asarray(_exact_difference(float(L_R.data), alpha * float(capped.data)))
    return out


# ---------------------------------------------------------------------------
# model

def _gru_shapes(d_in, d_h):
    return {"Wx": (d_in, 3 * d_h), "Wh": (d_h, 3 * d_h), "bx": (3 * d_h,), "bh": (3 * d_h,)}


class AGRUModel:
    """Parameter bundle plus forward passes; see module docstring."""

    def __init__(self, config, n_features, seq_len, binary_columns, params=None):
        self.config = config
        self.n_features = int(n_features)
        self.seq_len = int(seq_len)
        self.binary_columns = np.asarray(binary_columns, dtype=bool)
        if self.binary_columns.shape != (self.n_features,):
            raise ValueError("binary_columns must have one entry per feature")
        self.n_inputs = self.n_features + (1 if config.kind == "tlstm" else 0)
        self.shapes = self._shapes()
        if params is None:
            params = {name: self._init(name, shape) for name, shape in self.shapes.items()}
        self.params = {}
        for name, shape in self.shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    def _shapes(self):
        c = self.config
        d_e, d_h, n_z, F = c.feature_embed_dim, c.hidden_size, c.n_z, self.n_features
        s = {"encoder/embed/W": (self.n_inputs, d_e), "encoder/embed/b": (d_e,)}
        for direction in ("fwd", "bwd"):
            s.update({f"encoder/gru_{direction}/{k}": v for k, v in _gru_shapes(d_e, d_h).items()})
        s.update({"encoder/bottleneck/W": (2 * d_h, n_z), "encoder/bottleneck/b": (n_z,),
                  "decoder/init/W": (n_z, d_h), "decoder/init/b": (d_h,)})
        s.update({f"decoder/gru/{k}": v for k, v in _gru_shapes(d_h, d_h).items()})
        s.update({"decoder/out/W": (d_h, F), "decoder/out/b": (F,),
                  "discriminator/W": (n_z, 1), "discriminator/b": (1,)})
        return s

    def _init(self, name, shape):
        # biases and the discriminator start at zero: an unsaturated n'_w = 0.5
        if len(shape) == 1 or name.startswith(DISCRIMINATOR):
            return np.zeros(shape)
        rng = np.random.default_rng(derive_seed(self.config.seed, f"init:{name}"))
        fan_in, fan_out = shape
        if "/gru" in name:
            # one Glorot block per gate
            d = fan_out // 3
            return np.concatenate([ad.glorot_uniform(rng, fan_in, d) for _ in range(3)], axis=1)
        return ad.glorot_uniform(rng, fan_in, fan_out)

    def group(self, prefix):
        return {k: p for k, p in self.params.items() if k.startswith(prefix + "/")}

    def _gru(self, prefix, x, h):
        p = self.params
        return ad.gru_step(x, h, p[prefix + "/Wx"], p[prefix + "/Wh"], p[prefix + "/bx"], p[prefix + "/bh"])

    # -- forward ------------------------------------------------------------

    def encode(self, X, step_mask=None):
        """Embeddings ``z`` (B, n_z) for inputs ``X`` (B, T, n_inputs).

        ``step_mask`` (B, T) marks real steps of padded sequences; masked steps
        leave the hidden state untouched. Without it every row is consumed.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.n_inputs:
            raise ValueError(f"expected inputs (B, T, {self.n_inputs}), got {X.shape}")
        if self.config.kind == "tlstm":
            X = X.copy()
            X[..., -1] *= self.config.gap_scale
        p = self.params
        B, T, _ = X.shape
        d_h = self.config.hidden_size
        emb = [ad.relu(ad.linear(X[:, t], p["encoder/embed/W"], p["encoder/embed/b"])) for t in range(T)]
        h_f = Tensor(np.zeros((B, d_h)))
        h_b = Tensor(np.zeros((B, d_h)))
        for t in range(T):
            new = self._gru("encoder/gru_fwd", emb[t], h_f)
            h_f = new if step_mask is None else ad.blend(new, h_f, step_mask[:, t])
        for t in reversed(range(T)):
            new = self._gru("encoder/gru_bwd", emb[t], h_b)
            h_b = new if step_mask is None else ad.blend(new, h_b, step_mask[:, t])
        return ad.linear(ad.concat([h_f, h_b], axis=1), p["encoder/bottleneck/W"], p["encoder/bottleneck/b"])

    def decode(self, z, seq_len=None):
        """Reconstruction ``X'`` (B, T, F) unrolled from ``z`` without teacher forcing."""
        p = self.params
        T = self.seq_len if seq_len is None else seq_len
        h = ad.tanh(ad.linear(z, p["decoder/init/W"], p["decoder/init/b"]))
        outs = []
        for _ in range(T):
            h = self._gru("decoder/gru", h, h)
            outs.append(ad.column_sigmoid(ad.linear(h, p["decoder/out/W"], p["decoder/out/b"]),
                                          self.binary_columns))
        return ad.stack(outs, axis=1)

    def discriminate(self, z):
        p = self.params
        return _squeeze_last(ad.sigmoid(ad.linear(z, p["discriminator/W"], p["discriminator/b"])))

    def embed(self, data, batch_size=256):
        """Embeddings for every patient of a :class:`SequenceData` as a numpy array."""
        out = []
        for i in range(0, len(data), batch_size):
            sl = slice(i, i + batch_size)
            mask = None if data.step_mask is None else data.step_mask[sl]
            out.append(self.encode(data.inputs[sl], mask).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_z))

    # -- persistence --------------------------------------------------------

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)
            self.params[k]._version += 1

    def save(self, path, extra_meta=None):
        meta = {"config": self.config.to_dict(), "n_features": self.n_features, "seq_len": self.seq_len,
                "binary_columns": self.binary_columns.astype(int).tolist(), **(extra_meta or {})}
        ad.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path):
        params, meta = ad.load_checkpoint(path)
        return cls(ModelConfig.from_dict(meta["config"]), meta["n_features"], meta["seq_len"],
                   np.asarray(meta["binary_columns"], dtype=bool), params)


def _squeeze_last(t):
    """(B, 1) -> (B,) as a graph op."""
    return ad._make(t.data[..., 0], (t,), lambda g: (g[..., None],))


# ---------------------------------------------------------------------------
# data

@dataclass
class SequenceData:
    """Model-ready sequences.

    ``inputs`` (N, T, F_in) feed the encoder; ``targets`` (N, T, F) and
    ``window_mask`` (N, T) define the reconstruction loss; ``step_mask``
    marks real steps of padded sequences (None: all steps real); ``n_w`` is
    the discriminator target.
    """
    inputs: np.ndarray
    targets: np.ndarray
    window_mask: np.ndarray
    n_w: np.ndarray
    step_mask: Optional[np.ndarray] = None
    patient_ids: list = field(default_factory=list)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return SequenceData(self.inputs[idx], self.targets[idx], self.window_mask[idx], self.n_w[idx],
                            None if self.step_mask is None else self.step_mask[idx],
                            [self.patient_ids[i] for i in idx] if self.patient_ids else [])


def windowed_data(bundle):
    """Fixed-length sequences: every window, empty ones included."""
    return SequenceData(bundle.X, bundle.X, bundle.presence, bundle.n_w, None, list(bundle.patient_ids))


def compact_sequences(X, presence, max_len=None):
    """Drop empty windows and append the gap (in windows) to the previous data window.

    Returns ``(inputs, valid)`` with ``inputs`` (N, T_c, F + 1) where the last
    column is the gap (0 for the first data window) and rows past a patient's
    data windows are zero; ``T_c`` is ``max_len`` or the cohort maximum.
    """
    X = np.asarray(X)
    presence = np.asarray(presence, dtype=bool)
    N, _, F = X.shape
    counts = presence.sum(axis=1)
    T_c = int(counts.max()) if max_len is None else int(max_len)
    if counts.max() > T_c:
        raise ValueError(f"a patient has {counts.max()} data windows, more than max_len={T_c}")
    inputs = np.zeros((N, T_c, F + 1))
    valid = np.zeros((N, T_c), dtype=bool)
    for i in range(N):
        idx = np.flatnonzero(presence[i])
        n = len(idx)
        inputs[i, :n, :F] = X[i, idx]
        inputs[i, :n, F] = np.diff(idx, prepend=idx[0]) if n else []
        valid[i, :n] = True
    return inputs, valid


def compacted_data(bundle, max_len=None):
    inputs, valid = compact_sequences(bundle.X, bundle.presence, max_len)
    return SequenceData(inputs, inputs[..., :-1], valid, bundle.n_w, valid, list(bundle.patient_ids))


def model_data(bundle, config, max_len=None):
    return compacted_data(bundle, max_len) if config.kind == "tlstm" else windowed_data(bundle)


# ---------------------------------------------------------------------------
# training

LOG_COLUMNS = ("epoch", "split", "L_R", "L_bin", "L_cont", "L_D", "L_R_adv")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = -1

    def add(self, epoch, split, **values):
        row = {"epoch": epoch, "split": split, **values}
        for k in LOG_COLUMNS[2:]:
            if not math.isfinite(row[k]):
                raise DivergenceError(f"non-finite {k} at epoch {epoch} ({split}): {row}")
        self.rows.append(row)

    def series(self, split, key):
        return [r[key] for r in self.rows if r["split"] == split]

    def write_csv(self, path, header_lines=()):
        write_csv(path, self.rows, header_lines, fieldnames=LOG_COLUMNS)


def _forward_losses(model, batch, with_disc):
    z = model.encode(batch.inputs, batch.step_mask)
    X_rec = model.decode(z, batch.targets.shape[1])
    L_R, L_bin, L_cont = loss_reconstruction(batch.targets, X_rec, batch.window_mask, model.binary_columns,
                                             model.config.w_b)
    L_D = loss_discriminator(batch.n_w, model.discriminate(z)) if with_disc else None
    return z, L_R, L_bin, L_cont, L_D


def evaluate_losses(model, data, batch_size=256):
    """Element-count-weighted losses over ``data`` (forward only)."""
    c = model.config
    totals = dict(L_R=0.0, L_bin=0.0, L_cont=0.0, L_D=0.0, L_R_adv=0.0)
    n = len(data)
    for i in range(0, n, batch_size):
        batch = data.subset(np.arange(i, min(n, i + batch_size)))
        _, L_R, L_bin, L_cont, L_D = _forward_losses(model, batch, True)
        w = len(batch) / n
        totals["L_R"] += w * L_R.item()
        totals["L_bin"] += w * L_bin.item()
        totals["L_cont"] += w * L_cont.item()
        totals["L_D"] += w * L_D.item()
    totals["L_R_adv"] = loss_total(totals["L_R"], totals["L_D"], c.alpha, c.beta)
    return totals


def make_optimizers(model):
    """Separate Adam optimizers for the autoencoder and the discriminator."""
    c = model.config
    ae_opt = ad.Adam({**model.group(ENCODER), **model.group(DECODER)}, c.lr_ae, weight_decay=c.weight_decay)
    disc_opt = ad.Adam(model.group(DISCRIMINATOR), c.lr_disc, weight_decay=c.weight_decay)
    return ae_opt, disc_opt


def split_indices(n, train_fraction, seed):
    perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train(data, config, binary_columns, seq_len=None):
    """Two-step adversarial training; returns ``(model, log)`` at the best validation L_R."""
    n = len(data)
    if n < 2 * config.batch_size:
        raise ValueError(f"dataset of {n} sequences is smaller than 2 * batch_size ({2 * config.batch_size})")
    model = AGRUModel(config, data.targets.shape[2], seq_len or data.targets.shape[1], binary_columns)
    tr_idx, va_idx = split_indices(n, config.train_fraction, config.seed)
    train_set, val_set = data.subset(tr_idx), data.subset(va_idx)
    ae_opt, disc_opt = make_optimizers(model)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    tlog = TrainLog()
    best, best_state = math.inf, model.state_dict()
    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(train_set))
            sums = dict(L_R=0.0, L_bin=0.0, L_cont=0.0, L_D=0.0, L_R_adv=0.0)
            for start in range(0, len(order), config.batch_size):
                batch = train_set.subset(order[start:start + config.batch_size])
                vals = train_step(model, batch, ae_opt, disc_opt)
                w = len(batch) / len(train_set)
                for k in sums:
                    sums[k] += w * vals[k]
            tlog.add(epoch, "train", **sums)
            val = evaluate_losses(model, val_set)
            tlog.add(epoch, "val", **val)
            log.info("epoch %d train L_R %.4f L_D %.4f | val L_R %.4f L_D %.4f", epoch, sums["L_R"],
                     sums["L_D"], val["L_R"], val["L_D"])
            if val["L_R"] < best:
                best, best_state, tlog.best_epoch = val["L_R"], model.state_dict(), epoch
    except ad.NonFiniteError as exc:
        raise DivergenceError(f"non-finite values during training: {exc}; log so far: {tlog.rows[-4:]}") from exc
    model.load_state_dict(best_state)
    return model, tlog


def discriminator_step(model, batch, z, disc_opt):
    """Minimise L_D over discriminator parameters only; ``z`` is treated as a constant."""
    disc_opt.zero_grad()
    L_D = loss_discriminator(batch.n_w, model.discriminate(z.detach()))
    ad.backward(L_D)
    disc_opt.step()
    return L_D.item()


def autoencoder_step(model, batch, forward, ae_opt, disc_opt):
    """Minimise L'_R over encoder and decoder parameters, given ``forward = (z, L_R, L_bin, L_cont)``.

    The discriminator's current output enters the loss but its parameters
    are not updated; gradients that reach them are discarded.
    """
    c = model.config
    z, L_R, L_bin, L_cont = forward
    L_D = loss_discriminator(batch.n_w, model.discriminate(z.detach() if c.alpha == 0 else z))
    loss = loss_total(L_R, L_D, c.alpha, c.beta) if c.alpha > 0 else L_R
    ae_opt.zero_grad()
    ad.backward(loss)
    if c.clip_grad_norm:
        ad.clip_grad_norm(ae_opt.params.values(), c.clip_grad_norm)
    ae_opt.step()
    disc_opt.zero_grad()
    out = dict(L_R=L_R.item(), L_bin=L_bin.item(), L_cont=L_cont.item(), L_D=L_D.item())
    out["L_R_adv"] = loss.item() if c.alpha > 0 else loss_total(out["L_R"], out["L_D"], c.alpha, c.beta)
    return out


def train_step(model, batch, ae_opt, disc_opt):
    """One discriminator update followed by one autoencoder update."""
    z, L_R, L_bin, L_cont, _ = _forward_losses(model, batch, False)
    if model.config.trains_discriminator:
        discriminator_step(model, batch, z, disc_opt)
    out = autoencoder_step(model, batch, (z, L_R, L_bin, L_cont), ae_opt, disc_opt)
    for k, v in out.items():
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite {k} in training step: {out}")
    return out
