# Independent oracle for the entropy-pattern truth table (w=5, theta=0.1, tau=1.0).
W, THETA, TAU = 5, 0.1, 1.0
def d(H, k): return H[k] - H[k-1]
def flat(H, t):
    if t < W: return 0
    s = 0.0
    for k in range(t-W+1, t+1): s += abs(d(H, k))
    return int(s / W < THETA)
def spike(H, t):
    if t < 1: return 0
    return int(abs(d(H, t)) > TAU)
def osc(H, t):
    if t < W: return 0.0
    n = sum(1 for k in range(t-W+2, t+1) if d(H, k) * d(H, k-1) < 0)
    return n / (W - 1)
cases = [
 ("first step",                [0.7, 0.2, 3.0], 0),
 ("upward spike",              [0.5, 2.5], 1),
 ("downward spike",            [2.5, 0.5], 1),
 ("rise of exactly tau",       [0.5, 1.5], 1),
 ("fall of exactly tau",       [2.25, 1.25], 1),
 ("rise just above tau",       [0.5, 1.5000001], 1),
 ("rise just below tau",       [0.5, 1.499], 1),
 ("window not yet full",       [1.0]*5, 4),
 ("constant trace",            [1.0]*6, 5),
 ("alternating at exactly theta", [0.0, 0.1, 0.0, 0.1, 0.0, 0.1], 5),
 ("alternating below theta",   [0.0, 0.0625, 0.0, 0.0625, 0.0, 0.0625], 5),
 ("steady climb",              [0.0, 0.5, 1.0, 1.5, 2.0, 2.5], 5),
 ("one reversal",              [0.0, 0.25, 0.5, 0.75, 0.5, 0.25], 5),
 ("two reversals",             [1.0, 1.5, 1.0, 0.5, 0.0, 0.5], 5),
 ("three reversals",           [1.0, 1.5, 2.0, 1.5, 2.0, 1.5], 5),
 ("zero change breaks a reversal", [1.0, 1.5, 1.5, 1.0, 1.0, 1.5], 5),
 ("reversals outside the window", [0.0, 1.0, 0.0, 1.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25], 9),
 ("spike closing an oscillation", [1.0, 1.25, 1.0, 1.25, 1.0, 2.5], 5),
 ("mean change just below theta", [2.0, 2.0999, 2.1998, 2.2997, 2.3996, 2.4995], 5),
 ("mean change just above theta", [2.0, 2.125, 2.25, 2.375, 2.5, 2.625], 5),
 ("single jump averaging to theta", [1.0, 1.0, 1.0, 1.0, 1.0, 1.5], 5),
 ("single jump averaging below theta", [1.0, 1.0, 1.0, 1.0, 1.0, 1.49], 5),
 ("flat tail after a spike",    [0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], 7),
 ("spike seen by the flat window", [0.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0], 5),
 ("oscillation with spikes", [0.0, 2.0, 0.0, 2.0, 0.0, 2.0], 5),
]
assert len(cases) == 25
for name, H, t in cases:
    f, s, o = flat(H, t), spike(H, t), osc(H, t)
    pent = 0.2*f + 0.3*s + 0.5*o
    print(f"{name!r:40} flat={f} spike={s} osc={o} s_temp={1-pent!r}")
