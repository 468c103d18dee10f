"""Reference forward pass for the 4-token MLP-Mixer.

Written independently of the Rust implementation; used to freeze the
expected values in `tests/mixer_oracle.rs`. Parameter order follows the
documented weight-file layout.
"""
import math

TOKENS = 4
EPS = 1e-8


def layout(d, ht, hc, layers, k):
    out = [("embed.weight", TOKENS * d), ("embed.bias", TOKENS * d)]
    for l in range(layers):
        p = f"layers.{l}."
        out += [
            (p + "norm1.gamma", d), (p + "norm1.beta", d),
            (p + "token_mlp.fc1.weight", ht * TOKENS), (p + "token_mlp.fc1.bias", ht),
            (p + "token_mlp.fc2.weight", TOKENS * ht), (p + "token_mlp.fc2.bias", TOKENS),
            (p + "norm2.gamma", d), (p + "norm2.beta", d),
            (p + "channel_mlp.fc1.weight", hc * d), (p + "channel_mlp.fc1.bias", hc),
            (p + "channel_mlp.fc2.weight", d * hc), (p + "channel_mlp.fc2.bias", d),
        ]
    out += [("head.weight", k * d), ("head.bias", k)]
    return out


def gelu(a):
    return 0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0)))


def norm(row, gamma, beta):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    s = math.sqrt(var + EPS)
    return [gamma[c] * (row[c] - mu) / s + beta[c] for c in range(n)]


def forward(params, x, d, ht, hc, layers, k):
    it = iter(layout(d, ht, hc, layers, k))
    pos = 0
    P = {}
    for name, n in it:
        P[name] = params[pos:pos + n]
        pos += n
    assert pos == len(params)
    ew, eb = P["embed.weight"], P["embed.bias"]
    X = [[x[t] * ew[t * d + c] + eb[t * d + c] for c in range(d)] for t in range(TOKENS)]
    for l in range(layers):
        p = f"layers.{l}."
        Y = [norm(X[t], P[p + "norm1.gamma"], P[p + "norm1.beta"]) for t in range(TOKENS)]
        w1, b1 = P[p + "token_mlp.fc1.weight"], P[p + "token_mlp.fc1.bias"]
        w2, b2 = P[p + "token_mlp.fc2.weight"], P[p + "token_mlp.fc2.bias"]
        for c in range(d):
            hid = [gelu(sum(w1[j * TOKENS + t] * Y[t][c] for t in range(TOKENS)) + b1[j]) for j in range(ht)]
            for t in range(TOKENS):
                X[t][c] += sum(w2[t * ht + j] * hid[j] for j in range(ht)) + b2[t]
        Y = [norm(X[t], P[p + "norm2.gamma"], P[p + "norm2.beta"]) for t in range(TOKENS)]
        w3, b3 = P[p + "channel_mlp.fc1.weight"], P[p + "channel_mlp.fc1.bias"]
        w4, b4 = P[p + "channel_mlp.fc2.weight"], P[p + "channel_mlp.fc2.bias"]
        for t in range(TOKENS):
            hid = [gelu(sum(w3[j * d + c] * Y[t][c] for c in range(d)) + b3[j]) for j in range(hc)]
            for c in range(d):
                X[t][c] += sum(w4[c * hc + j] * hid[j] for j in range(hc)) + b4[c]
    m = [sum(X[t][c] for t in range(TOKENS)) / TOKENS for c in range(d)]
    hw, hb = P["head.weight"], P["head.bias"]
    return [sum(hw[o * d + c] * m[c] for c in range(d)) + hb[o] for o in range(k)]


def constant_params(d, ht, hc, layers, k):
    """All weights 0.1, biases 0, norm gain 1 / shift 0."""
    out = []
    for name, n in layout(d, ht, hc, layers, k):
        if name.endswith("gamma"):
            out += [1.0] * n
        elif name.endswith("beta") or name.endswith("bias"):
            out += [0.0] * n
        else:
            out += [0.1] * n
    return out


def sine_params(d, ht, hc, layers, k):
    n = sum(n for _, n in layout(d, ht, hc, layers, k))
    return [0.3 * math.sin(0.37 * j + 0.5) for j in range(n)]


if __name__ == "__main__":
    print("constant d=2 h=2 L=2 x=0.5:", repr(forward(constant_params(2, 2, 2, 2, 1), [0.5] * 4, 2, 2, 2, 2, 1)))
    print("sine d=2 h=2 L=2 k=1:", repr(forward(sine_params(2, 2, 2, 2, 1), [0.3, -1.2, 0.7, 2.0], 2, 2, 2, 2, 1)))
    print("sine d=3 ht=5 hc=4 L=2 k=2:", repr(forward(sine_params(3, 5, 4, 2, 2), [0.3, -1.2, 0.7, 2.0], 3, 5, 4, 2, 2)))
    print("sine d=4 ht=3 hc=6 L=1 k=1:", repr(forward(sine_params(4, 3, 6, 1, 1), [1.1, 0.25, -0.4, 0.05], 4, 3, 6, 1, 1)))
