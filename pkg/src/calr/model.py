"""Encoders with hand-written gradients, cluster memory, losses, and AdamW.

Everything runs on float64 numpy arrays; no autodiff. Backward passes take
the upstream gradient wrt the block's output and return parameter gradients
(plus the input gradient where downstream blocks need it).
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .core import ClusterAssignment, as_generator

logger = logging.getLogger(__name__)

_DEGENERATE_NORM = 1e-12
_RENORM_TOL = 1e-12


def _normalize_rows_fwd(z):
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"encoder produced a zero vector at row {bad[0]}")
    return z / norms[:, None], norms


def _normalize_rows_bwd(dy, y, norms):
    # dL/dz = (dL/dy - (dL/dy . y) y) / ||z||
    inner = np.einsum("ij,ij->i", dy, y)
    return (dy - inner[:, None] * y) / norms[:, None]


class EncoderModel:
    """Linear or one-hidden-tanh map onto the unit sphere.

    params: {"w", "b"} for linear, {"w1", "b1", "w2", "b2"} for mlp, with
    weight shape (out, in). encode returns (embeddings, cache) and
    backward(cache, d_embeddings) returns gradients keyed like params.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        keys = set(params)
        if keys == {"w", "b"}:
            self.arch = "linear"
        elif keys == {"w1", "b1", "w2", "b2"}:
            self.arch = "mlp"
        else:
            raise ValueError(f"unrecognized parameter set {sorted(keys)}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        if self.arch == "linear":
            if self.params["w"].ndim != 2 or self.params["b"].shape != (self.params["w"].shape[0],):
                raise ValueError("linear encoder needs w (out, in) and b (out,)")
        else:
            w1, w2 = self.params["w1"], self.params["w2"]
            if w2.shape[1] != w1.shape[0]:
                raise ValueError("mlp shapes disagree: w2 columns must match w1 rows")

    @classmethod
    def init_linear(cls, dim_in: int, dim_out: int | None = None) -> "EncoderModel":
        """Identity-like start: encode(x) == l2_normalize(x) when square."""
        dim_out = dim_in if dim_out is None else dim_out
        return cls({"w": np.eye(dim_out, dim_in), "b": np.zeros(dim_out)})

    @classmethod
    def init_mlp(cls, dim_in: int, hidden: int, dim_out: int, rng) -> "EncoderModel":
        rng = as_generator(rng)
        w1 = rng.normal(size=(hidden, dim_in)) / np.sqrt(dim_in)
        w2 = rng.normal(size=(dim_out, hidden)) / np.sqrt(hidden)
        return cls({"w1": w1, "b1": np.zeros(hidden), "w2": w2, "b2": np.zeros(dim_out)})

    @property
    def dim_in(self) -> int:
        return self.params["w" if self.arch == "linear" else "w1"].shape[1]

    @property
    def dim_out(self) -> int:
        return self.params["w" if self.arch == "linear" else "w2"].shape[0]

    @property
    def hidden(self) -> int:
        return 0 if self.arch == "linear" else self.params["w1"].shape[0]

    def clone(self) -> "EncoderModel":
        return EncoderModel({k: v.copy() for k, v in self.params.items()})

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim_in:
            raise ValueError(f"expected (n, {self.dim_in}) inputs, got {x.shape}")
        if self.arch == "linear":
            z = x @ self.params["w"].T + self.params["b"]
            y, norms = _normalize_rows_fwd(z)
            return y, {"x": x, "y": y, "norms": norms}
        h_pre = x @ self.params["w1"].T + self.params["b1"]
        h = np.tanh(h_pre)
        z = h @ self.params["w2"].T + self.params["b2"]
        y, norms = _normalize_rows_fwd(z)
        return y, {"x": x, "h": h, "y": y, "norms": norms}

    def backward(self, cache: dict, dy) -> dict[str, np.ndarray]:
        dy = np.asarray(dy, dtype=np.float64)
        dz = _normalize_rows_bwd(dy, cache["y"], cache["norms"])
        if self.arch == "linear":
            return {"w": dz.T @ cache["x"], "b": dz.sum(axis=0)}
        h = cache["h"]
        dh = dz @ self.params["w2"]
        dh_pre = dh * (1.0 - h * h)
        return {
            "w1": dh_pre.T @ cache["x"],
            "b1": dh_pre.sum(axis=0),
            "w2": dz.T @ h,
            "b2": dz.sum(axis=0),
        }


def grl_backward(grad, lam: float) -> np.ndarray:
    """Gradient reversal: identity forward, g -> -lam * g backward."""
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return -lam * np.asarray(grad, dtype=np.float64)


class DomainClassifier:
    """Linear softmax head predicting the camera of an embedding."""

    def __init__(self, params: dict[str, np.ndarray]):
        if set(params) != {"w", "b"}:
            raise ValueError("domain classifier needs w (cameras, dim) and b (cameras,)")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def init(cls, dim: int, n_cameras: int) -> "DomainClassifier":
        if n_cameras < 2:
            raise ValueError(f"domain alignment needs >= 2 cameras, got {n_cameras}")
        # zero start: exactly uniform camera posterior
        return cls({"w": np.zeros((n_cameras, dim)), "b": np.zeros(n_cameras)})

    @property
    def n_cameras(self) -> int:
        return self.params["w"].shape[0]

    def clone(self) -> "DomainClassifier":
        return DomainClassifier({k: v.copy() for k, v in self.params.items()})

    def probabilities(self, emb) -> np.ndarray:
        logits = np.asarray(emb, dtype=np.float64) @ self.params["w"].T + self.params["b"]
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def domain_loss(classifier: DomainClassifier, emb, camera_ids, lam: float = 1.0):
    """Summed cross-entropy of camera prediction, with reversed input grads.

    Returns (loss, classifier_grads, d_emb_reversed). Classifier gradients
    are the true ones; the embedding gradient is scaled by -lam (the
    reversal), so lam = 0 zeroes it exactly.
    """
    emb = np.asarray(emb, dtype=np.float64)
    cams = np.asarray(camera_ids, dtype=np.int64)
    n = classifier.n_cameras
    if cams.min(initial=0) < 0 or cams.max(initial=-1) >= n:
        raise ValueError(f"camera label out of range [0, {n})")
    if emb.shape[0] != cams.shape[0]:
        raise ValueError("embedding/camera count mismatch")
    probs = classifier.probabilities(emb)
    picked = probs[np.arange(len(cams)), cams]
    loss = float(-np.log(picked).sum())
    dlogits = probs.copy()
    dlogits[np.arange(len(cams)), cams] -= 1.0
    grads = {"w": dlogits.T @ emb, "b": dlogits.sum(axis=0)}
    d_emb = dlogits @ classifier.params["w"]
    return loss, grads, grl_backward(d_emb, lam)


def total_loss(inter_loss: float, domain: float, beta: float = 1.0) -> float:
    """L = L_inter + beta * L_domain; rejects NaN inputs."""
    if np.isnan(inter_loss) or np.isnan(domain):
        raise ValueError("loss became NaN")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return float(inter_loss + beta * domain)


class MemoryBank:
    """One unit-norm vector per cluster, updated by momentum toward queries."""

    def __init__(self, entries, cluster_ids, momentum: float = 0.2, temperature: float = 0.1):
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        self.entries = np.asarray(entries, dtype=np.float64)
        self.cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
        if self.entries.ndim != 2 or len(self.cluster_ids) != len(self.entries):
            raise ValueError("entries and cluster_ids disagree")
        self.momentum = float(momentum)
        self.temperature = float(temperature)
        self._row_of = {int(c): i for i, c in enumerate(self.cluster_ids)}

    @classmethod
    def from_assignment(
        cls,
        assignment: ClusterAssignment,
        embeddings,
        momentum: float = 0.2,
        temperature: float = 0.1,
    ) -> "MemoryBank":
        """Mean embedding per cluster, L2-normalized. Degenerate zero means
        (e.g. two antipodal members) drop their cluster with a warning."""
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.shape[0] != assignment.n_samples:
            raise ValueError("embeddings do not match the assignment")
        rows, ids = [], []
        for k in range(assignment.n_clusters):
            mean = emb[assignment.members(k)].mean(axis=0)
            norm = float(np.linalg.norm(mean))
            if norm < _DEGENERATE_NORM:
                logger.warning("cluster %d has a degenerate mean embedding; dropped", k)
                continue
            rows.append(mean / norm)
            ids.append(k)
        entries = np.array(rows, dtype=np.float64).reshape(len(rows), emb.shape[1])
        return cls(entries, np.array(ids, dtype=np.int64), momentum, temperature)

    @property
    def size(self) -> int:
        return len(self.entries)

    def has_cluster(self, cluster_id: int) -> bool:
        return int(cluster_id) in self._row_of

    def row_of(self, cluster_id: int) -> int:
        try:
            return self._row_of[int(cluster_id)]
        except KeyError:
            raise ValueError(f"cluster {cluster_id} is not in the memory bank") from None

    def update(self, cluster_id: int, query) -> float:
        """u_k <- l2_normalize(m * u_k + (1 - m) * q); returns the pre-norm.

        Computed as u + (1 - m)(q - u) so an update with q == u_k leaves the
        entry bit-identical; renormalization only kicks in when the result
        drifts off the sphere by more than 1e-12.
        """
        row = self.row_of(cluster_id)
        q = np.asarray(query, dtype=np.float64)
        u = self.entries[row]
        if q.shape != u.shape:
            raise ValueError("query dimension mismatch")
        v = u + (1.0 - self.momentum) * (q - u)
        norm = float(np.linalg.norm(v))
        if norm < _DEGENERATE_NORM:
            raise ValueError(f"memory update for cluster {cluster_id} collapsed to zero")
        if abs(norm - 1.0) > _RENORM_TOL:
            v = v / norm
        self.entries[row] = v
        return norm


def contrastive_loss(bank: MemoryBank, query, positive_cluster: int, weight: float = 1.0):
    """-w * log softmax(q . U / tau)[positive]; gradient wrt the query only.

    The memory is a constant here; its momentum update happens separately.
    """
    q = np.asarray(query, dtype=np.float64)
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    row = bank.row_of(positive_cluster)
    logits = bank.entries @ q / bank.temperature
    shift = logits.max()
    lse = shift + np.log(np.exp(logits - shift).sum())
    loss = float(weight * (lse - logits[row]))
    probs = np.exp(logits - lse)
    d_q = weight * (probs @ bank.entries - bank.entries[row]) / bank.temperature
    return loss, d_q


def contrastive_loss_batch(bank: MemoryBank, queries, positive_clusters, weights=None):
    """Mean contrastive loss over a batch, plus per-row query gradients."""
    q = np.asarray(queries, dtype=np.float64)
    pos = np.asarray(positive_clusters, dtype=np.int64)
    n = q.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.array([bank.row_of(int(c)) for c in pos])
    logits = q @ bank.entries.T / bank.temperature
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    losses = w * (lse - logits[np.arange(n), rows])
    probs = np.exp(logits - lse[:, None])
    d_q = (w[:, None] * (probs @ bank.entries - bank.entries[rows])) / (bank.temperature * n)
    return float(losses.mean()), d_q


class AdamW:
    """Adam with decoupled weight decay over a dict of parameter arrays."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 3.5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 5e-4,
    ):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if set(grads) != set(self.m):
            raise ValueError("gradient keys do not match optimizer state")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for key in sorted(params):
            g = np.asarray(grads[key], dtype=np.float64)
            if g.shape != params[key].shape:
                raise ValueError(f"gradient shape mismatch for {key!r}")
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            params[key] -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                params[key] -= self.lr * self.weight_decay * params[key]


CHECKPOINT_MAGIC = "calr-checkpoint-v1"


def _param_order(encoder: EncoderModel, classifier: DomainClassifier | None):
    order = [("enc", k) for k in sorted(encoder.params)]
    if classifier is not None:
        order += [("clf", k) for k in sorted(classifier.params)]
    return order


def save_checkpoint(path, encoder: EncoderModel, classifier: DomainClassifier | None = None, n_cameras: int = 0) -> None:
    """Text header, blank line, then all parameters as little-endian float32."""
    path = Path(path)
    header = [
        f"format: {CHECKPOINT_MAGIC}",
        f"arch: {encoder.arch}",
        f"dim_in: {encoder.dim_in}",
        f"hidden: {encoder.hidden}",
        f"dim_out: {encoder.dim_out}",
        f"n_cameras: {int(n_cameras)}",
        f"has_classifier: {int(classifier is not None)}",
    ]
    blobs = []
    for scope, key in _param_order(encoder, classifier):
        src = encoder.params[key] if scope == "enc" else classifier.params[key]
        blobs.append(np.ascontiguousarray(src, dtype="<f4").tobytes())
    payload = "\n".join(header).encode("utf-8") + b"\n\n" + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


def load_checkpoint(path):
    """Returns (encoder, classifier_or_None, n_cameras); round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError("malformed checkpoint: missing header terminator")
    fields = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    if fields.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a recognized checkpoint: format={fields.get('format')!r}")
    arch = fields["arch"]
    dim_in, hidden, dim_out = int(fields["dim_in"]), int(fields["hidden"]), int(fields["dim_out"])
    n_cameras = int(fields["n_cameras"])
    has_clf = bool(int(fields["has_classifier"]))

    if arch == "linear":
        shapes = {"w": (dim_out, dim_in), "b": (dim_out,)}
    elif arch == "mlp":
        shapes = {
            "w1": (hidden, dim_in),
            "b1": (hidden,),
            "w2": (dim_out, hidden),
            "b2": (dim_out,),
        }
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    clf_shapes = {"w": (n_cameras, dim_out), "b": (n_cameras,)} if has_clf else {}

    blob = raw[sep + 2 :]
    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        return arr.reshape(shape).astype(np.float64)

    enc_params = {k: take(shapes[k]) for k in sorted(shapes)}
    clf_params = {k: take(clf_shapes[k]) for k in sorted(clf_shapes)} if has_clf else None
    if offset != len(blob):
        raise ValueError(f"checkpoint blob holds {len(blob)} bytes, expected {offset}")
    encoder = EncoderModel(enc_params)
    classifier = DomainClassifier(clf_params) if has_clf else None
    return encoder, classifier, n_cameras
