"""Independent oracles the test suite checks the library against.

Everything here is written from the definitions rather than by calling the
code paths under test: float64 re-implementations of each graph plus
central finite differences for gradients, a second from-scratch BLEU, and
(elsewhere in the suite) exhaustive enumeration for beam search and
truncated forward passes for the loss grid.
"""

import math

import numpy as np

from flexdepth import tensor as T


def fd_grads(fn, arrays, eps=1e-3):
    """Central-difference gradients of scalar ``fn(arrays)`` per array.

    Arrays are perturbed in place one element at a time; ``fn`` must be a
    pure function of their current contents. Run this on float64 copies so
    the differences measure the function, not float32 rounding.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        flat_grad = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + eps
            up = fn(arrays)
            flat[idx] = original - eps
            down = fn(arrays)
            flat[idx] = original
            flat_grad[idx] = (up - down) / (2.0 * eps)
        grads.append(grad)
    return grads


def relative_grad_error(analytic, numeric):
    """2-norm relative error, treating a missing analytic grad as zero."""
    num = np.asarray(numeric, dtype=np.float64)
    ana = np.zeros_like(num) if analytic is None else np.asarray(analytic, dtype=np.float64)
    denom = max(np.linalg.norm(num), np.linalg.norm(ana))
    if denom < 1e-10:
        return 0.0
    return float(np.linalg.norm(num - ana) / denom)


# ---------------------------------------------------------------------------
# float64 reference math (kept independent of flexdepth.tensor internals)


def softmax64(x, axis=-1, mask=None):
    if mask is None:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    masked = np.where(mask, x, -np.inf)
    peak = masked.max(axis=axis, keepdims=True)
    peak = np.where(np.isneginf(peak), 0.0, peak)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    dead = total == 0
    return np.where(dead, 1.0 / x.shape[axis], e / np.where(dead, 1.0, total))


def layer_norm64(x, gain, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def cross_entropy64(logits, targets, pad_id, smoothing):
    peak = logits.max(axis=1, keepdims=True)
    log_probs = logits - (np.log(np.exp(logits - peak).sum(axis=1, keepdims=True)) + peak)
    nonpad = targets != pad_id
    gold = np.where(nonpad, targets, 0)
    nll = -log_probs[np.arange(len(targets)), gold]
    per_pos = (1.0 - smoothing) * nll - (smoothing / logits.shape[1]) * log_probs.sum(axis=1)
    return float(per_pos[nonpad].sum() / nonpad.sum())


# ---------------------------------------------------------------------------
# graph catalog: (name, leaves, engine builder, float64 reference)
#
# Each case owns float32 leaf arrays, an engine closure mapping leaf Tensors
# to a scalar loss Tensor, and an independent float64 closure computing the
# same quantity. Together they cover every differentiable op.


class GraphCase:
    def __init__(self, name, leaves, engine, reference):
        self.name = name
        self.leaves = leaves
        self.engine = engine
        self.reference = reference


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


def autograd_graph_catalog(seed):
    """Small random graphs, one or more per op, for gradient checking."""
    rng = np.random.default_rng(seed)
    cases = []

    a, b, c = _u(rng, 3, 4), _u(rng, 4), _u(rng, 3, 4)
    cases.append(GraphCase(
        "add_mul_broadcast", [a, b, c],
        lambda ls: T.sum_(T.mul(T.add(ls[0], ls[1]), ls[2])),
        lambda xs: float(((xs[0] + xs[1]) * xs[2]).sum()),
    ))

    x = _u(rng, 2, 3)
    cases.append(GraphCase(
        "scale_then_mul", [x],
        lambda ls: T.sum_(T.mul(T.scale(ls[0], 1.7), ls[0])),
        lambda xs: float((1.7 * xs[0] * xs[0]).sum()),
    ))

    a, b, w = _u(rng, 3, 4), _u(rng, 4, 2), _u(rng, 3, 2)
    cases.append(GraphCase(
        "matmul_2d", [a, b],
        lambda ls, w=w: T.sum_(T.mul(T.matmul(ls[0], ls[1]), T.Tensor(w))),
        lambda xs, w=w: float(((xs[0] @ xs[1]) * w).sum()),
    ))

    a, b, w = _u(rng, 2, 3, 4), _u(rng, 4, 5), _u(rng, 2, 3, 5)
    cases.append(GraphCase(
        "matmul_broadcast_batch", [a, b],
        lambda ls, w=w: T.sum_(T.mul(T.matmul(ls[0], ls[1]), T.Tensor(w))),
        lambda xs, w=w: float(((xs[0] @ xs[1]) * w).sum()),
    ))

    a, b, w = _u(rng, 2, 3, 4), _u(rng, 2, 4, 3), _u(rng, 2, 3, 3)
    cases.append(GraphCase(
        "matmul_full_batch", [a, b],
        lambda ls, w=w: T.sum_(T.mul(T.matmul(ls[0], ls[1]), T.Tensor(w))),
        lambda xs, w=w: float(((xs[0] @ xs[1]) * w).sum()),
    ))

    x = _u(rng, 3, 5)
    x += np.where(np.abs(x) < 0.05, np.sign(x) * 0.1, 0).astype(np.float32)  # keep off the relu kink
    w = _u(rng, 3, 5)
    cases.append(GraphCase(
        "relu", [x],
        lambda ls, w=w: T.sum_(T.mul(T.relu(ls[0]), T.Tensor(w))),
        lambda xs, w=w: float((np.maximum(xs[0], 0.0) * w).sum()),
    ))

    x, w = _u(rng, 3, 6), _u(rng, 3, 6)
    cases.append(GraphCase(
        "softmax_last_axis", [x],
        lambda ls, w=w: T.sum_(T.mul(T.softmax(ls[0], axis=-1), T.Tensor(w))),
        lambda xs, w=w: float((softmax64(xs[0], axis=-1) * w).sum()),
    ))

    x, w = _u(rng, 4, 3), _u(rng, 4, 3)
    cases.append(GraphCase(
        "softmax_axis0", [x],
        lambda ls, w=w: T.sum_(T.mul(T.softmax(ls[0], axis=0), T.Tensor(w))),
        lambda xs, w=w: float((softmax64(xs[0], axis=0) * w).sum()),
    ))

    x, w = _u(rng, 3, 6), _u(rng, 3, 6)
    mask = rng.random((3, 6)) < 0.6
    mask[:, 0] = True  # at least one live key per row
    mask[2, :] = False  # one fully-masked row exercises the uniform fallback
    cases.append(GraphCase(
        "softmax_masked", [x],
        lambda ls, w=w, mask=mask: T.sum_(T.mul(T.softmax(ls[0], axis=-1, mask=mask), T.Tensor(w))),
        lambda xs, w=w, mask=mask: float((softmax64(xs[0], axis=-1, mask=mask) * w).sum()),
    ))

    x, gain, bias, w = _u(rng, 4, 6), _u(rng, 6), _u(rng, 6), _u(rng, 4, 6)
    cases.append(GraphCase(
        "layer_norm", [x, gain, bias],
        lambda ls, w=w: T.sum_(T.mul(T.layer_norm(ls[0], ls[1], ls[2]), T.Tensor(w))),
        lambda xs, w=w: float((layer_norm64(xs[0], xs[1], xs[2]) * w).sum()),
    ))

    table, w = _u(rng, 7, 5), _u(rng, 2, 3, 5)
    ids = rng.integers(0, 7, size=(2, 3))
    cases.append(GraphCase(
        "embedding", [table],
        lambda ls, ids=ids, w=w: T.sum_(T.mul(T.embedding(ls[0], ids), T.Tensor(w))),
        lambda xs, ids=ids, w=w: float((xs[0][ids] * w).sum()),
    ))

    a, b, w = _u(rng, 2, 3), _u(rng, 2, 2), _u(rng, 2, 5)
    cases.append(GraphCase(
        "concatenate", [a, b],
        lambda ls, w=w: T.sum_(T.mul(T.concatenate([ls[0], ls[1]], axis=1), T.Tensor(w))),
        lambda xs, w=w: float((np.concatenate([xs[0], xs[1]], axis=1) * w).sum()),
    ))

    a, w = _u(rng, 3, 4), _u(rng, 6, 2)
    cases.append(GraphCase(
        "reshape_transpose", [a],
        lambda ls, w=w: T.sum_(T.mul(T.transpose(T.reshape(ls[0], (2, 6)), (1, 0)), T.Tensor(w))),
        lambda xs, w=w: float((xs[0].reshape(2, 6).T * w).sum()),
    ))

    x, w = _u(rng, 4, 5), _u(rng, 4, 5)
    drop_seed = int(rng.integers(0, 2**31))
    keep64 = ((np.random.default_rng(drop_seed).random((4, 5), dtype=np.float32) >= 0.25)
              * np.float64(np.float32(1.0) / np.float32(0.75)))
    cases.append(GraphCase(
        "dropout", [x],
        lambda ls, s=drop_seed, w=w: T.sum_(T.mul(
            T.dropout(ls[0], 0.25, np.random.default_rng(s)), T.Tensor(w))),
        lambda xs, keep=keep64, w=w: float((xs[0] * keep * w).sum()),
    ))

    logits = _u(rng, 5, 6)
    targets = np.array([3, 0, 2, 5, 1])  # position 1 is padding
    cases.append(GraphCase(
        "cross_entropy", [logits],
        lambda ls, t=targets: T.cross_entropy(ls[0], t, pad_id=0, label_smoothing=0.0),
        lambda xs, t=targets: cross_entropy64(xs[0], t, 0, 0.0),
    ))

    logits = _u(rng, 4, 7)
    targets = np.array([6, 2, 0, 4])
    cases.append(GraphCase(
        "cross_entropy_smoothed", [logits],
        lambda ls, t=targets: T.cross_entropy(ls[0], t, pad_id=0, label_smoothing=0.1),
        lambda xs, t=targets: cross_entropy64(xs[0], t, 0, 0.1),
    ))

    x = _u(rng, 3, 4)
    cases.append(GraphCase(
        "mean_of_squares", [x],
        lambda ls: T.mean(T.mul(ls[0], ls[0])),
        lambda xs: float((xs[0] * xs[0]).mean()),
    ))

    q, k, v = _u(rng, 2, 3, 4), _u(rng, 2, 3, 4), _u(rng, 2, 3, 4)
    gain, bias, w = _u(rng, 4), _u(rng, 4), _u(rng, 2, 3, 4)

    def attention_engine(ls, gain=gain, bias=bias, w=w):
        scores = T.scale(T.matmul(ls[0], T.transpose(ls[1], (0, 2, 1))), 0.5)
        mixed = T.matmul(T.softmax(scores, axis=-1), ls[2])
        return T.sum_(T.mul(T.layer_norm(mixed, T.Tensor(gain), T.Tensor(bias)), T.Tensor(w)))

    def attention_reference(xs, gain=gain, bias=bias, w=w):
        scores = 0.5 * (xs[0] @ np.transpose(xs[1], (0, 2, 1)))
        mixed = softmax64(scores, axis=-1) @ xs[2]
        return float((layer_norm64(mixed, gain.astype(np.float64), bias.astype(np.float64)) * w).sum())

    cases.append(GraphCase("attention_like", [q, k, v], attention_engine, attention_reference))

    x, w1, w2, w = _u(rng, 3, 4), _u(rng, 4, 6), _u(rng, 6, 2), _u(rng, 3, 2)
    b1 = _u(rng, 6)
    while np.abs(x @ w1 + b1).min() < 0.02:  # keep pre-activations off the relu kink
        b1 = _u(rng, 6)
    cases.append(GraphCase(
        "ffn_like", [x, w1, b1, w2],
        lambda ls, w=w: T.sum_(T.mul(
            T.matmul(T.relu(T.add(T.matmul(ls[0], ls[1]), ls[2])), ls[3]), T.Tensor(w))),
        lambda xs, w=w: float(((np.maximum(xs[0] @ xs[1] + xs[2], 0.0) @ xs[3]) * w).sum()),
    ))

    return cases


def check_case(case, eps=1e-3, rtol=1e-3):
    """Run one catalog case: forward agreement plus gradient agreement."""
    leaf_tensors = [T.Tensor(arr, requires_grad=True) for arr in case.leaves]
    loss = case.engine(leaf_tensors)
    arrays64 = [arr.astype(np.float64) for arr in case.leaves]
    ref_value = case.reference(arrays64)
    assert math.isfinite(ref_value)
    assert abs(float(loss.data) - ref_value) <= 1e-4 * max(1.0, abs(ref_value)), (
        f"{case.name}: forward value {float(loss.data)} vs reference {ref_value}")
    T.backward(loss)
    numeric = fd_grads(case.reference, arrays64, eps=eps)
    worst = 0.0
    for leaf, num in zip(leaf_tensors, numeric):
        worst = max(worst, relative_grad_error(leaf.grad, num))
    assert worst < rtol, f"{case.name}: gradient relative error {worst:.3e}"
    return worst


def sequence_log_prob(params, src_ids, seq, enc_layers, dec_layers):
    """Teacher-forced log-probability of emitting ``seq`` given the source."""
    from flexdepth import tensor as T
    from flexdepth.data import BOS_ID, EOS_ID
    from flexdepth.model import decoder_forward, encoder_forward, project_logits

    with T.no_grad():
        model_input = np.asarray([list(src_ids) + [EOS_ID]])
        memory = encoder_forward(model_input, enc_layers, params).tap(enc_layers)
        prefix = np.asarray([[BOS_ID] + list(seq[:-1])])
        taps = decoder_forward(prefix, memory, dec_layers, params)
        logits = project_logits(taps.tap(dec_layers), params).data[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return float(sum(log_probs[t, tok] for t, tok in enumerate(seq)))


def enumerate_best_sequence(params, src_ids, config):
    """Brute force over every complete output sequence up to the length cap.

    A complete sequence is EOS-terminated or exactly ``max_len`` tokens with
    no earlier EOS. Returns the emitted ids (EOS stripped) maximizing
    log-probability over the length penalty, ties to the smallest sequence.
    """
    import itertools

    from flexdepth.data import EOS_ID
    from flexdepth.decoding import length_penalty

    vocab = params.config.vocab_size
    max_steps = config.max_len if config.max_len is not None else len(src_ids) + 8
    max_steps = min(max_steps, params.config.max_len - 1)
    body = [t for t in range(vocab) if t != EOS_ID]

    best = None
    for length in range(0, max_steps + 1):
        if length < max_steps:
            stems = itertools.product(body, repeat=length)
            finishers = [list(stem) + [EOS_ID] for stem in stems]
        else:
            finishers = [list(stem) for stem in itertools.product(body, repeat=length)]
        for seq in finishers:
            score = sequence_log_prob(params, src_ids, seq, config.enc_layers,
                                      config.dec_layers)
            penalized = score / length_penalty(len(seq), config.alpha)
            key = (-penalized, seq)
            if best is None or key < best:
                best = key
    seq = best[1]
    return seq[:-1] if seq and seq[-1] == EOS_ID else seq


def reference_sentence_bleu(hyp, ref, smooth_zeros):
    """From-scratch sentence BLEU: clipped n-gram precisions up to 4-grams
    combined geometrically, times a brevity penalty. ``smooth_zeros``
    replaces zero match (or zero total) counts with 1. Returns [0, 100].
    """
    hyp = [t.lower() for t in hyp]
    ref = [t.lower() for t in ref]
    if len(hyp) == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        hyp_counts = {}
        for i in range(len(hyp) - n + 1):
            gram = tuple(hyp[i:i + n])
            hyp_counts[gram] = hyp_counts.get(gram, 0) + 1
        ref_counts = {}
        for i in range(len(ref) - n + 1):
            gram = tuple(ref[i:i + n])
            ref_counts[gram] = ref_counts.get(gram, 0) + 1
        matched = 0
        for gram, count in hyp_counts.items():
            matched += min(count, ref_counts.get(gram, 0))
        total = max(0, len(hyp) - n + 1)
        if smooth_zeros:
            if matched == 0:
                matched = 1
            if total == 0:
                total = 1
        if matched == 0 or total == 0:
            return 0.0
        log_sum += 0.25 * math.log(matched / total)
    if len(hyp) < len(ref):
        bp = math.exp(1.0 - len(ref) / len(hyp))
    else:
        bp = 1.0
    return bp * math.exp(log_sum) * 100.0
