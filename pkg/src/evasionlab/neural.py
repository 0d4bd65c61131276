"""From-scratch bidirectional LSTM classifier with exact backpropagation.

Everything is plain numpy. Parameters live in small structured objects but
flatten to one contiguous float64 vector (documented order below) so the
optimizers, the gradient checker and the checkpoint writer all speak the
same language.

Flatten order: for each layer, forward cell then backward cell (when
bidirectional), each cell as w_x, w_h, b row-major; then head weight, head
bias. Gate blocks inside the 4H axis are ordered i, f, g, o.

Sequence handling: batches are (B, T, D) with a 0/1 mask (B, T) marking
real steps; padding is always at the tail. Masked steps carry the previous
state forward, so the state after step T-1 is the state at the last real
step. The backward direction runs the same cell over each sample's
reversed valid prefix.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    EmptySequenceError,
    ShapeMismatchError,
    TapeReuseError,
    TruncatedFileError,
)
from .features import FeatureScaler

CHECKPOINT_MAGIC = b"BLSM"
CHECKPOINT_VERSION = 1

READOUT_FINAL = "final"
READOUT_MEAN = "mean"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    input_dim: int = 16
    classes: int = 8
    frame: int = 5
    layers: int = 2
    bidirectional: bool = True
    readout: str = READOUT_FINAL

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.input_dim < 1 or self.classes < 2:
            raise ValueError("hidden/input_dim/classes out of range")
        if self.layers not in (1, 2):
            raise ValueError("layers must be 1 or 2")
        if self.frame < 1:
            raise ValueError("frame must be >= 1")
        if self.readout not in (READOUT_FINAL, READOUT_MEAN):
            raise ValueError(f"unknown readout {self.readout!r}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def rep_dim(self) -> int:
        return self.hidden * self.directions


@dataclass
class LstmCellParams:
    w_x: np.ndarray  # (4H, D)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


def _xavier(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_cell(rng: np.random.Generator, d: int, h: int) -> LstmCellParams:
    w_x = _xavier(rng, (4 * h, d), d, h)
    w_h = _xavier(rng, (4 * h, h), h, h)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # forget-gate bias starts open
    return LstmCellParams(w_x=w_x, w_h=w_h, b=b)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell_forward(
    x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, p: LstmCellParams
) -> tuple[np.ndarray, np.ndarray, dict]:
    """One cell step on vectors (or batches of vectors along axis 0)."""
    h = p.hidden
    if x.shape[-1] != p.w_x.shape[1] or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ShapeMismatchError(
            f"cell shapes: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs w_x {p.w_x.shape}, w_h {p.w_h.shape}"
        )
    a = x @ p.w_x.T + h_prev @ p.w_h.T + p.b
    i = _sigmoid(a[..., 0 * h : 1 * h])
    f = _sigmoid(a[..., 1 * h : 2 * h])
    g = np.tanh(a[..., 2 * h : 3 * h])
    o = _sigmoid(a[..., 3 * h : 4 * h])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h_out = o * tanh_c
    cache = {"i": i, "f": f, "g": g, "o": o, "c": c, "tanh_c": tanh_c}
    return h_out, c, cache


def reverse_padded(arr: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Reverse the first lengths[b] steps of each sample, leave the tail.

    An involution: applying it twice restores the input.
    """
    out = arr.copy()
    for b, n in enumerate(lengths):
        out[b, :n] = arr[b, :n][::-1]
    return out


@dataclass
class _DirectionCache:
    z: np.ndarray  # direction-ordered inputs (B, T, D)
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_new: np.ndarray
    tanh_c: np.ndarray
    c: np.ndarray  # carried cell states (B, T, H)
    h: np.ndarray  # carried hidden states (B, T, H)


@dataclass
class ForwardTape:
    """Everything backward() needs; consumed exactly once."""

    x: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    layer_inputs: list[np.ndarray]
    caches: list[list[_DirectionCache]]  # [layer][direction]
    dropout_masks: list[np.ndarray | None]  # per layer boundary
    rep_mask: np.ndarray | None
    rep: np.ndarray
    logits: np.ndarray
    consumed: bool = False


class BiLstmModel:
    """Stacked (1-2 layer) bidirectional LSTM with a softmax head."""

    def __init__(
        self,
        config: ModelConfig,
        layers: list[list[LstmCellParams]],
        head_w: np.ndarray,
        head_b: np.ndarray,
        scaler: FeatureScaler | None = None,
    ):
        self.config = config
        self.layers = layers  # [layer][direction]
        self.head_w = head_w
        self.head_b = head_b
        self.scaler = scaler

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "BiLstmModel":
        rng = np.random.default_rng(seed)
        h = config.hidden
        layers: list[list[LstmCellParams]] = []
        d_in = config.input_dim
        for _ in range(config.layers):
            cells = [_init_cell(rng, d_in, h)]
            if config.bidirectional:
                cells.append(_init_cell(rng, d_in, h))
            layers.append(cells)
            d_in = config.rep_dim
        head_w = _xavier(
            rng, (config.classes, config.rep_dim), config.rep_dim, config.classes
        )
        head_b = np.zeros(config.classes)
        return cls(config, layers, head_w, head_b)

    # -- parameter vector plumbing ------------------------------------------

    def _tensors(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for cells in self.layers:
            for cell in cells:
                out += [cell.w_x, cell.w_h, cell.b]
        out += [self.head_w, self.head_b]
        return out

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self._tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self._tensors()])

    def load_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.n_params:
            raise ShapeMismatchError(
                f"flat vector has {vec.size} entries, model needs {self.n_params}"
            )
        pos = 0
        for t in self._tensors():
            t[...] = vec[pos : pos + t.size].reshape(t.shape)
            pos += t.size

    # -- forward ------------------------------------------------------------

    def _run_direction(
        self, z: np.ndarray, mask: np.ndarray, cell: LstmCellParams
    ) -> _DirectionCache:
        b_sz, t_len, _ = z.shape
        h = cell.hidden
        a_x = z @ cell.w_x.T + cell.b  # (B, T, 4H)
        shape = (b_sz, t_len, h)
        cache = _DirectionCache(
            z=z,
            i=np.empty(shape), f=np.empty(shape), g=np.empty(shape),
            o=np.empty(shape), c_new=np.empty(shape), tanh_c=np.empty(shape),
            c=np.empty(shape), h=np.empty(shape),
        )
        h_prev = np.zeros((b_sz, h))
        c_prev = np.zeros((b_sz, h))
        for t in range(t_len):
            a = a_x[:, t] + h_prev @ cell.w_h.T
            i = _sigmoid(a[:, 0 * h : 1 * h])
            f = _sigmoid(a[:, 1 * h : 2 * h])
            g = np.tanh(a[:, 2 * h : 3 * h])
            o = _sigmoid(a[:, 3 * h : 4 * h])
            c_new = f * c_prev + i * g
            tanh_c = np.tanh(c_new)
            h_new = o * tanh_c
            m = mask[:, t : t + 1]
            h_t = m * h_new + (1.0 - m) * h_prev
            c_t = m * c_new + (1.0 - m) * c_prev
            cache.i[:, t] = i
            cache.f[:, t] = f
            cache.g[:, t] = g
            cache.o[:, t] = o
            cache.c_new[:, t] = c_new
            cache.tanh_c[:, t] = tanh_c
            cache.c[:, t] = c_t
            cache.h[:, t] = h_t
            h_prev, c_prev = h_t, c_t
        return cache

    def forward(
        self,
        x: np.ndarray,
        mask: np.ndarray,
        train: bool = False,
        dropout: float = 0.0,
        dropout_seed: int = 0,
    ) -> tuple[np.ndarray, ForwardTape]:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != cfg.input_dim:
            raise ShapeMismatchError(
                f"batch must be (B, T, {cfg.input_dim}), got {x.shape}"
            )
        if mask.shape != x.shape[:2]:
            raise ShapeMismatchError(f"mask {mask.shape} does not match {x.shape[:2]}")
        lengths = mask.sum(axis=1).astype(int)
        if (lengths == 0).any():
            raise EmptySequenceError("a sequence in the batch has an all-zero mask")

        use_dropout = train and dropout > 0.0
        drop_rng = np.random.default_rng(dropout_seed) if use_dropout else None
        keep = 1.0 - dropout

        layer_inputs: list[np.ndarray] = []
        caches: list[list[_DirectionCache]] = []
        dropout_masks: list[np.ndarray | None] = []
        cur = x
        for li, cells in enumerate(self.layers):
            layer_inputs.append(cur)
            layer_caches = [self._run_direction(cur, mask, cells[0])]
            if cfg.bidirectional:
                z_rev = reverse_padded(cur, lengths)
                layer_caches.append(self._run_direction(z_rev, mask, cells[1]))
            caches.append(layer_caches)
            if cfg.bidirectional:
                h_bwd_in_order = reverse_padded(layer_caches[1].h, lengths)
                out = np.concatenate([layer_caches[0].h, h_bwd_in_order], axis=2)
            else:
                out = layer_caches[0].h
            if li < len(self.layers) - 1:
                if use_dropout:
                    assert drop_rng is not None
                    dmask = (drop_rng.random(out.shape) >= dropout) / keep
                    dropout_masks.append(dmask)
                    cur = out * dmask
                else:
                    dropout_masks.append(None)
                    cur = out
            else:
                last_out = out

        if cfg.readout == READOUT_FINAL:
            rep = np.concatenate(
                [c.h[:, -1] for c in caches[-1]], axis=1
            )  # carried final state = last real step
        else:
            counts = lengths.astype(np.float64)[:, None]
            rep = (last_out * mask[:, :, None]).sum(axis=1) / counts

        rep_mask: np.ndarray | None = None
        if use_dropout:
            assert drop_rng is not None
            rep_mask = (drop_rng.random(rep.shape) >= dropout) / keep
            rep = rep * rep_mask

        logits = rep @ self.head_w.T + self.head_b
        tape = ForwardTape(
            x=x, mask=mask, lengths=lengths, layer_inputs=layer_inputs,
            caches=caches, dropout_masks=dropout_masks, rep_mask=rep_mask,
            rep=rep, logits=logits,
        )
        return logits, tape

    # -- backward -----------------------------------------------------------

    def _direction_backward(
        self,
        cache: _DirectionCache,
        mask: np.ndarray,
        cell: LstmCellParams,
        d_h_steps: np.ndarray,
        d_h_final: np.ndarray | None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (dz, dw_x, dw_h, db) for one direction scan."""
        b_sz, t_len, h = cache.h.shape
        d_a = np.empty((b_sz, t_len, 4 * h))
        dh_carry = np.zeros((b_sz, h)) if d_h_final is None else d_h_final.copy()
        dc_carry = np.zeros((b_sz, h))
        for t in range(t_len - 1, -1, -1):
            m = mask[:, t : t + 1]
            dh_t = d_h_steps[:, t] + dh_carry
            dc_t = dc_carry
            h_prev = cache.h[:, t - 1] if t > 0 else np.zeros((b_sz, h))
            c_prev = cache.c[:, t - 1] if t > 0 else np.zeros((b_sz, h))
            # h_t = m*h_new + (1-m)*h_prev ; c_t = m*c_new + (1-m)*c_prev
            dh_new = m * dh_t
            dc_new = m * dc_t
            dh_skip = (1.0 - m) * dh_t
            dc_skip = (1.0 - m) * dc_t
            i, f, g, o = cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t]
            tanh_c = cache.tanh_c[:, t]
            d_o = dh_new * tanh_c
            dc_new = dc_new + dh_new * o * (1.0 - tanh_c * tanh_c)
            d_f = dc_new * c_prev
            d_i = dc_new * cache.g[:, t]
            d_g = dc_new * i
            dc_prev = dc_new * f
            da_t = d_a[:, t]
            da_t[:, 0 * h : 1 * h] = d_i * i * (1.0 - i)
            da_t[:, 1 * h : 2 * h] = d_f * f * (1.0 - f)
            da_t[:, 2 * h : 3 * h] = d_g * (1.0 - g * g)
            da_t[:, 3 * h : 4 * h] = d_o * o * (1.0 - o)
            dh_carry = dh_skip + da_t @ cell.w_h
            dc_carry = dc_skip + dc_prev
        flat_a = d_a.reshape(-1, 4 * h)
        dz = (flat_a @ cell.w_x).reshape(cache.z.shape)
        dw_x = flat_a.T @ cache.z.reshape(-1, cache.z.shape[2])
        h_prev_all = np.zeros_like(cache.h)
        h_prev_all[:, 1:] = cache.h[:, :-1]
        dw_h = flat_a.T @ h_prev_all.reshape(-1, h)
        db = flat_a.sum(axis=0)
        return dz, dw_x, dw_h, db


    def backward(self, tape: ForwardTape, labels: np.ndarray) -> np.ndarray:
        """Gradient of mean cross-entropy over the batch, flattened."""
        if tape.consumed:
            raise TapeReuseError("forward tape already consumed by a backward pass")
        tape.consumed = True
        cfg = self.config
        labels = np.asarray(labels, dtype=int)
        b_sz = tape.logits.shape[0]
        if labels.shape != (b_sz,):
            raise ShapeMismatchError(f"labels {labels.shape} vs batch {b_sz}")

        probs = softmax(tape.logits)
        d_logits = probs.copy()
        d_logits[np.arange(b_sz), labels] -= 1.0
        d_logits /= b_sz

        d_head_w = d_logits.T @ tape.rep
        d_head_b = d_logits.sum(axis=0)
        d_rep = d_logits @ self.head_w
        if tape.rep_mask is not None:
            d_rep = d_rep * tape.rep_mask

        h = cfg.hidden
        t_len = tape.x.shape[1]
        grads_per_layer: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = [
            [] for _ in self.layers
        ]

        # Per-step upstream gradient for the top layer's concatenated output.
        top_out_dim = cfg.rep_dim
        d_out = np.zeros((b_sz, t_len, top_out_dim))
        d_final: list[np.ndarray | None] = [None] * cfg.directions
        if cfg.readout == READOUT_FINAL:
            for di in range(cfg.directions):
                d_final[di] = d_rep[:, di * h : (di + 1) * h]
        else:
            weights = tape.mask[:, :, None] / tape.lengths.astype(np.float64)[:, None, None]
            d_out += d_rep[:, None, :] * weights

        for li in range(len(self.layers) - 1, -1, -1):
            cells = self.layers[li]
            caches = tape.caches[li]
            d_in = np.zeros_like(tape.layer_inputs[li])
            # forward direction
            dz, dw_x, dw_h, db = self._direction_backward(
                caches[0], tape.mask, cells[0], d_out[..., :h],
                d_final[0] if li == len(self.layers) - 1 else None,
            )
            d_in += dz
            grads_per_layer[li].append((dw_x, dw_h, db))
            if cfg.bidirectional:
                d_steps_rev = reverse_padded(d_out[..., h:], tape.lengths)
                dz_rev, dw_x2, dw_h2, db2 = self._direction_backward(
                    caches[1], tape.mask, cells[1], d_steps_rev,
                    d_final[1] if li == len(self.layers) - 1 else None,
                )
                d_in += reverse_padded(dz_rev, tape.lengths)
                grads_per_layer[li].append((dw_x2, dw_h2, db2))
            if li > 0:
                dmask = tape.dropout_masks[li - 1]
                d_out = d_in if dmask is None else d_in * dmask
                d_final = [None] * cfg.directions

        flat_parts: list[np.ndarray] = []
        for layer_grads in grads_per_layer:
            for dw_x, dw_h, db in layer_grads:
                flat_parts += [dw_x.ravel(), dw_h.ravel(), db.ravel()]
        flat_parts += [d_head_w.ravel(), d_head_b.ravel()]
        return np.concatenate(flat_parts)

    # -- inference ----------------------------------------------------------

    def predict(self, rows: np.ndarray) -> tuple[int, np.ndarray]:
        """Classify one sequence of feature rows; ties go to the lowest code."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise EmptySequenceError(f"expected (n, dim) rows, got {rows.shape}")
        if self.scaler is not None:
            rows = self.scaler.transform(rows)
        t_len = max(self.config.frame, rows.shape[0])
        x = np.zeros((1, t_len, self.config.input_dim))
        mask = np.zeros((1, t_len))
        x[0, : rows.shape[0]] = rows
        mask[0, : rows.shape[0]] = 1.0
        logits, _ = self.forward(x, mask)
        probs = softmax(logits)[0]
        return int(np.argmax(probs)), probs


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_xent(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the stabilized softmax probabilities."""
    labels = np.asarray(labels, dtype=int)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    true_shifted = shifted[np.arange(len(labels)), labels]
    loss = float(np.mean(lse - true_shifted))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    return loss, probs


def dropout_forward(
    activations: np.ndarray, rate: float, seed: int, train_mode: bool
) -> np.ndarray:
    """Inverted dropout: scales kept units by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not train_mode or rate == 0.0:
        return activations
    rng = np.random.default_rng(seed)
    mask = (rng.random(activations.shape) >= rate) / (1.0 - rate)
    return activations * mask


def grad_check(
    model: BiLstmModel,
    x: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    logits, tape = model.forward(x, mask)
    del logits
    analytic = model.backward(tape, labels)
    theta = model.flatten()
    numeric = np.empty_like(theta)
    for idx in range(theta.size):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            bumped = theta.copy()
            bumped[idx] += sign * eps
            model.load_flat(bumped)
            logits, _ = model.forward(x, mask)
            loss, _ = softmax_xent(logits, labels)
            if slot == 0:
                up = loss
            else:
                down = loss
        numeric[idx] = (up - down) / (2.0 * eps)
    model.load_flat(theta)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- checkpoint io ----------------------------------------------------------


def save_model(model: BiLstmModel, path: str) -> None:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(
        struct.pack(
            "<HHHHHBB",
            cfg.input_dim,
            cfg.hidden,
            cfg.classes,
            cfg.frame,
            cfg.layers,
            1 if cfg.bidirectional else 0,
            0 if cfg.readout == READOUT_FINAL else 1,
        )
    )
    if model.scaler is not None:
        buf.write(struct.pack("<B", 1))
        buf.write(np.ascontiguousarray(model.scaler.shift, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(model.scaler.scale, dtype="<f8").tobytes())
    else:
        buf.write(struct.pack("<B", 0))
    flat = model.flatten()
    buf.write(struct.pack("<Q", flat.size))
    buf.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path: str) -> BiLstmModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a model checkpoint (magic {data[:4]!r})")
    pos = 4
    (version,) = struct.unpack_from("<H", data, pos)
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise BadMagicError(f"unsupported checkpoint version {version}")
    input_dim, hidden, classes, frame, layers, bi, readout_code = struct.unpack_from(
        "<HHHHHBB", data, pos
    )
    pos += 12
    (scaler_flag,) = struct.unpack_from("<B", data, pos)
    pos += 1
    scaler = None
    if scaler_flag:
        need = 2 * input_dim * 8
        if pos + need > len(data):
            raise TruncatedFileError("checkpoint scaler block truncated")
        shift = np.frombuffer(data, dtype="<f8", count=input_dim, offset=pos).copy()
        pos += input_dim * 8
        scale = np.frombuffer(data, dtype="<f8", count=input_dim, offset=pos).copy()
        pos += input_dim * 8
        scaler = FeatureScaler(shift=shift, scale=scale)
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if pos + count * 8 > len(data):
        raise TruncatedFileError("checkpoint parameter block truncated")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).copy()
    config = ModelConfig(
        hidden=hidden,
        input_dim=input_dim,
        classes=classes,
        frame=frame,
        layers=layers,
        bidirectional=bool(bi),
        readout=READOUT_FINAL if readout_code == 0 else READOUT_MEAN,
    )
    model = BiLstmModel.initialize(config, seed=0)
    model.scaler = scaler
    model.load_flat(flat)
    return model


__all__ = [
    "ModelConfig",
    "LstmCellParams",
    "BiLstmModel",
    "ForwardTape",
    "lstm_cell_forward",
    "reverse_padded",
    "softmax",
    "softmax_xent",
    "dropout_forward",
    "grad_check",
    "save_model",
    "load_model",
    "CHECKPOINT_MAGIC",
]
