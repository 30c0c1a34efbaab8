"""Independent brute-force oracles the engine is checked against.

Everything here deliberately takes the slow, obvious route: materialize the
full share matrix of each linear projection, normalize its rows, and multiply.
No code is shared with the propagation paths under test.
"""

import numpy as np


def share_matrix_lrp(h, weight, r_out, rule="zplus", epsilon=1e-6):
    """Relevance through one linear projection via the dense share matrix.

    Under z+ a zero-sum output row spreads its relevance uniformly over all
    inputs; under epsilon the row sum is stabilized away from zero instead.
    """
    h = np.asarray(h, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    e, d = weight.shape
    w = np.maximum(weight, 0.0) if rule == "zplus" else weight
    shares = w * h[None, :]          # (E, D): contribution of input i to output j
    norm = np.zeros_like(shares)
    for j in range(e):
        total = shares[j].sum()
        if rule == "zplus":
            if total == 0.0:
                norm[j, :] = 1.0 / d
            else:
                norm[j] = shares[j] / total
        else:
            total = total + epsilon * (1.0 if total >= 0 else -1.0)
            norm[j] = shares[j] / total
    return norm.T @ r_out


def unrolled_conv_matrix(x_shape, weight, stride, padding):
    """The conv as an explicit (C_out*oh*ow) x (C_in*H*W) matrix.

    Padding positions simply have no column, so they are absent from both
    numerators and denominators of any rule applied to this matrix.
    """
    c_in, h, w = x_shape
    c_out, _, k, _ = weight.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    mat = np.zeros((c_out * oh * ow, c_in * h * w), dtype=np.float64)
    for co in range(c_out):
        for oi in range(oh):
            for oj in range(ow):
                row = (co * oh + oi) * ow + oj
                for ci in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            ii = oi * stride - padding + di
                            jj = oj * stride - padding + dj
                            if 0 <= ii < h and 0 <= jj < w:
                                col = (ci * h + ii) * w + jj
                                mat[row, col] = weight[co, ci, di, dj]
    return mat


def maxpool_winner_matrix(x, k, stride, padding=0):
    """0/1 routing matrix of a max pool: one winner column per output row."""
    c, h, w = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    mat = np.zeros((c * oh * ow, c * h * w), dtype=np.float64)
    for ci in range(c):
        for oi in range(oh):
            for oj in range(ow):
                best = None
                best_val = -np.inf
                for di in range(k):
                    for dj in range(k):
                        ii = oi * stride - padding + di
                        jj = oj * stride - padding + dj
                        if 0 <= ii < h and 0 <= jj < w and x[ci, ii, jj] > best_val:
                            best_val = x[ci, ii, jj]
                            best = (ci * h + ii) * w + jj
                mat[(ci * oh + oi) * ow + oj, best] = 1.0
    return mat


def fc_chain_layers(graph):
    """Extract the weight matrices of a 1x1-image fully-connected-style graph.

    Expects a stem of 1x1 convs (with optional relus), no blocks, and a head
    of [gap, fc, softmax]; returns the matrices in forward order.
    """
    mats = []
    for node in graph.stem:
        if node.kind == "conv":
            w = graph.tensors[node.weight]
            mats.append(w.reshape(w.shape[0], w.shape[1]).astype(np.float64))
        elif node.kind != "relu":
            raise AssertionError(f"unexpected stem node {node.kind}")
    assert [n.kind for n in graph.head] == ["gap", "fc", "softmax"]
    mats.append(graph.tensors[graph.head[1].weight].astype(np.float64))
    return mats


def fc_oracle_explain(graph, x0, class_index):
    """Brute-force explanation of a 1x1-image FC-style graph.

    Replays the forward contract (float64 accumulation, float32 storage, relu
    between projections, bias on the final fc) and then propagates the seeded
    class probability back through dense share matrices.
    """
    mats = fc_chain_layers(graph)
    bias = graph.tensors[graph.head[1].bias] if graph.head[1].bias else None

    acts = []  # input of each projection, float32 like the engine caches
    v = np.asarray(x0, dtype=np.float32)
    for i, mat in enumerate(mats):
        acts.append(v)
        y = mat @ v.astype(np.float64)
        if i == len(mats) - 1 and bias is not None:
            y = y + bias.astype(np.float64)
        v = y.astype(np.float32)
        if i < len(mats) - 1:
            v = np.maximum(v, np.float32(0))
    logits = v.astype(np.float64)
    z = np.exp(logits - logits.max())
    probs = (z / z.sum()).astype(np.float32)

    r = np.zeros(len(probs), dtype=np.float64)
    r[class_index] = probs[class_index]
    for mat, h in zip(reversed(mats), reversed(acts)):
        r = share_matrix_lrp(h.astype(np.float64), mat, r, rule="zplus")
    return r, probs
