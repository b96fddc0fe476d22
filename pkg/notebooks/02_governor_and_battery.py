# # The core governor and the battery simulator
#
# The governor picks a mode and a core budget from battery, charging state
# and free memory. The simulator turns that choice into scans per charge.

import numpy as np

from tinyq.eqo import DeviceState, GovernorPolicy, decide
from tinyq.runtime import Battery, EnergyModel, SimConfig, energy_per_scan, latency_model, simulate

policy = GovernorPolicy()
working_set = 2 << 20
plenty = 4 << 30

# ## Decisions across battery levels

for battery in (100, 80, 75.0, 50, 10):
    for charging in (False, True):
        d = decide(policy, DeviceState(battery, charging, plenty, 8), working_set)
        print(f"battery {battery:>5} charging {charging!s:>5} -> {d.mode.value:<12} budget {d.core_budget}")

# Memory below 1.5x the working set blocks Performance unless charging
print(decide(policy, DeviceState(90, False, working_set, 8), working_set))

# ## Per-scan cost under the default energy model

em = EnergyModel()
for cores in range(1, 9):
    print(f"{cores} cores: {latency_model(em, cores):.3f} s, {energy_per_scan(em, cores):.3f} J")

# ## Scans per charge

report = simulate(SimConfig())
print(report.scans, "EQO split:", report.scans_by_mode)
print("additional scans", report.additional_scans, "extension", round(report.extension_ratio, 4))

# Where the governed run switches from 4 cores to 1
switch = next(i for i, e in enumerate(report.trace) if e.core_budget == 1)
print("switch at scan", switch, "battery", round(report.trace[switch].battery_pct, 3))

# ## Extension vs parallel fraction
#
# With little parallel work, four cores mostly add power and saving mode wins
# big. Near perfect scaling four cores finish fast enough to be the cheaper
# point, and governing by battery level then costs scans.

for f in np.linspace(0, 1, 6):
    r = simulate(SimConfig(energy_model=EnergyModel(parallel_fraction=float(f))))
    print(f"f={f:.1f} extension {r.extension_ratio:+.3f}")

# ## The reference device

ref = simulate(SimConfig(battery=Battery(6392.0)))
print("reference device additional scans", ref.additional_scans)
