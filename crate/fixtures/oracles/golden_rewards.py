# Independent evaluation of the golden reward fixture: outcome rewards by exact
# rational comparison, entropy rewards from the raw answer distributions,
# weighted totals, group advantages and GRPO losses.
import csv, math, struct
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from fractions import Fraction
import os
root = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "golden")
man = tomllib.load(open(f"{root}/data/manifest.toml", "rb"))
exp = {r["traj_id"]: r for r in csv.DictReader(open(f"{root}/expected/rewards.csv"))}
W, TH, TAU = 5, 0.1, 1.0
def ent(p):
    s = sum(p); return max(0.0, -sum((q/s)*math.log(q/s) for q in p if q > 0))
def stemp(H, t):
    d = lambda k: H[k]-H[k-1]
    f = int(t >= W and sum(abs(d(k)) for k in range(t-W+1, t+1))/W < TH)
    s = int(t >= 1 and abs(d(t)) > TAU)
    o = sum(1 for k in range(t-W+2, t+1) if d(k)*d(k-1) < 0)/(W-1) if t >= W else 0.0
    return 1 - (0.2*f + 0.3*s + 0.5*o)
totals = {}
worst = 0.0
for e in man["trajectories"]:
    b = open(f"{root}/data/{e['path']}", "rb").read()
    T, D, K = struct.unpack_from("<III", b, 8)
    off = 20 + 4*T*D
    dists = [struct.unpack_from(f"<{K}f", b, off + 4*K*t) for t in range(T)]
    H = [ent(p) for p in dists]
    r_ent = sum(stemp(H, t) for t in range(T))/T
    r_out = 1.0 if Fraction(e["predicted_answer"]) == Fraction(e["gold_answer"]) else -1.0
    x = exp[e["id"]]
    total = r_out + 0.5*float(x["r_proc"]) + 0.3*r_ent + 0.2*float(x["r_mani"])
    totals[e["id"]] = (e["query"], total)
    for name, mine in [("r_out", r_out), ("r_ent", r_ent), ("total", total)]:
        worst = max(worst, abs(mine - float(x[name])))
        print(e["id"], name, mine, x[name])
for q in {q for q, _ in totals.values()}:
    ids = [i for i, (qq, _) in totals.items() if qq == q]
    v = [totals[i][1] for i in ids]; m = sum(v)/len(v); sd = math.sqrt(sum((a-m)**2 for a in v)/len(v))
    for i, a in zip(ids, v):
        adv = (a-m)/(sd+1e-8); worst = max(worst, abs(adv-float(exp[i]["advantage"]))); print(i, "adv", adv, exp[i]["advantage"])
print("max abs diff", worst)

# GRPO loss per query group with beta_KL = 0.01, from the frozen totals.
rolls = list(csv.DictReader(open(f"{root}/data/rollouts.csv")))
for q in sorted({r["query"] for r in rolls}):
    rows = [r for r in rolls if r["query"] == q]
    v = [totals[r["traj_id"]][1] for r in rows]
    m = sum(v)/len(v); sd = math.sqrt(sum((a-m)**2 for a in v)/len(v))
    adv = [(a-m)/(sd+1e-8) for a in v]
    lp = [float(r["logprob"]) for r in rows]; ref = [float(r["ref_logprob"]) for r in rows]
    loss = -sum(a*l for a, l in zip(adv, lp))/len(rows) + 0.01*sum(l-r for l, r in zip(lp, ref))/len(rows)
    print(q, "grpo_loss", repr(loss))
