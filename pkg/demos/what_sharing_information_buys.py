"""Who sees what: centralized versus decentralized information.

Two storages must keep their exchanges balanced.  When a coordinator
sees both noise histories, the exchange can react to them; when each
storage only sees its own, the exchange has to be agreed in advance.
The resource bound with the best fixed exchange turns out to be exactly
the decentralized optimum.
"""
from stochdecomp import (
    InformationStructure,
    decentralized_bruteforce,
    global_dp,
    upper_bound,
)
from stochdecomp.coordination import admissible_resource_grid
from stochdecomp.microgrid import enumeration_instance
from stochdecomp.model import CoordinationKind, CoordinationProcess

central = enumeration_instance()
shared = global_dp(central).value
private = decentralized_bruteforce(enumeration_instance(InformationStructure.DECENTRALIZED))
print(f"centralized optimum    {shared:.4f}")
print(f"decentralized optimum  {private:.4f}")

grids = [admissible_resource_grid(central, t) for t in range(central.horizon)]
print("\nfixed exchanges and their resource bounds:")
best = None
for a in grids[0]:
    for b in grids[1]:
        r = CoordinationProcess(CoordinationKind.RESOURCE, [a, b], central.coupling.dims)
        v = upper_bound(central, r).value
        print(f"  t0 {a}  t1 {b}  ->  {v:.4f}")
        best = v if best is None else min(best, v)
print(f"\nbest fixed exchange    {best:.4f}")
print(f"value of sharing noise {private - shared:.4f}")
