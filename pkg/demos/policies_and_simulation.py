"""From value tables to decisions: simulating the decomposed policies.

Each bound comes with one value table per unit.  Plugging those tables
into a one-step coupled problem gives a feasible policy.  We score the
policies exactly (the instance is small) and by Monte Carlo, and show
that the simulated costs agree with the exact ones.
"""
from stochdecomp import (
    PolicyKind,
    PolicySpec,
    evaluate_policy_exact,
    global_dp,
    maximize_lower_bound,
    minimize_upper_bound,
    simulate_policy,
    suggest_resource,
)
from stochdecomp.microgrid import deterministic_variant, shipped_instance

inst = shipped_instance("micro-2")
lb = maximize_lower_bound(inst)
ub = minimize_upper_bound(inst, suggest_resource(inst))
exact = global_dp(inst).value

print(f"{'policy':<15}{'exact':>10}{'simulated':>12}{'95% hw':>10}")
for kind, rep in ((PolicyKind.PRICE, lb), (PolicyKind.RESOURCE, ub),
                  (PolicyKind.DECENTRALIZED, ub)):
    spec = PolicySpec.from_report(rep, inst, kind)
    v = evaluate_policy_exact(spec).x0_value
    sim = simulate_policy(spec, 5000, seed=1, workers=4)
    print(f"{kind.value:<15}{v:>10.5f}{sim.mean:>12.5f}{sim.halfwidth:>10.5f}")

print(f"\n{'optimum':<15}{exact:>10.5f}")
print(f"{'lower bound':<15}{lb.value:>10.5f}")
print(f"{'upper bound':<15}{ub.value:>10.5f}")

# without noise a single scenario is the whole story, so simulation is exact
det = deterministic_variant(inst)
rep = minimize_upper_bound(det, suggest_resource(det))
spec = PolicySpec.from_report(rep, det)
print("\ndeterministic demand, simulated == exact:",
      simulate_policy(spec, 2, seed=0).mean == evaluate_policy_exact(spec).x0_value)

# trajectories of the first scenario, as CSV
sim = simulate_policy(PolicySpec.from_report(ub, inst), 2, seed=1, record=True)
print()
print("\n".join(sim.trajectory_csv().splitlines()[:1 + inst.horizon * inst.n_units]))
