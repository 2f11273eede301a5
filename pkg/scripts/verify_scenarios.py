import os
import sys

# Add app directory to path
sys.path.append(os.getcwd())

from app.services.access import AccessMode, TrustMode
from app.services.harness import (
    bench_platform,
    report_write,
    scenario_gpio_roundtrip,
    scenario_irq_latency,
    scenario_register_scaling,
    scenario_spi_rate,
    write_sweep,
)

OUT_DIR = "reports"
SPI_WORDS = 64


def check(name, condition):
    print(f"{'ok  ' if condition else 'FAIL'} {name}")
    return condition


if __name__ == "__main__":
    os.makedirs(OUT_DIR, exist_ok=True)
    desc = bench_platform()
    ok = True

    # 1. GPIO roundtrip, every mode and trust level
    print("\n--- GPIO roundtrip ---")
    roundtrip = {
        (m, t): scenario_gpio_roundtrip(desc, m, t) for m in AccessMode for t in TrustMode
    }
    report_write(roundtrip.values(), os.path.join(OUT_DIR, "gpio_roundtrip.csv"))
    steps = {k: r.metrics["roundtrip_steps"] for k, r in roundtrip.items()}
    for (m, t), s in steps.items():
        print(f"{m.value:>9} {t.value:>9}: {s}")
    T, U = TrustMode.TRUSTED, TrustMode.UNTRUSTED
    ok &= check("trusted MMIO < trusted RAPI", steps[(AccessMode.MMIO, T)] < steps[(AccessMode.RAPI, T)])
    ok &= check("trusted RAPI <= trusted OSAPI", steps[(AccessMode.RAPI, T)] <= steps[(AccessMode.OSAPI, T)])
    ok &= check("untrusted MMIO > untrusted RAPI", steps[(AccessMode.MMIO, U)] > steps[(AccessMode.RAPI, U)])

    # 2. Interrupt latency
    print("\n--- Interrupt latency ---")
    latency = [scenario_irq_latency(desc, m, t) for m in AccessMode for t in TrustMode]
    report_write(latency, os.path.join(OUT_DIR, "irq_latency.csv"))
    for r in latency:
        print(f"{r.mode:>9} {r.trust:>9}: latency={r.metrics['latency_steps']} prologue={sum(r.phases['prologue'].values())}")
    ok &= check("snapshot observed in every mode", all(r.metrics["observed_flag"] == r.metrics["expected_flag"] for r in latency))
    ok &= check("prologue identical across modes", len({tuple(r.phases["prologue"].values()) for r in latency}) == 1)

    # 3. SPI rate sweep
    print("\n--- SPI rate sweep ---")
    sweeps = [scenario_spi_rate(desc, m, t, words=SPI_WORDS) for m in AccessMode for t in TrustMode]
    write_sweep(sweeps, os.path.join(OUT_DIR, "spi_rate.csv"))
    for r in sweeps:
        fractions = [row["measured_fraction"] for row in r.rows]
        ok &= check(f"{r.mode} {r.trust} monotone", all(a <= b for a, b in zip(fractions, fractions[1:])))

    # 4. Register-count scaling
    print("\n--- Register scaling ---")
    scaling = scenario_register_scaling()
    print(f"slope={scaling.metrics['slope']} intercept={scaling.metrics['intercept']}")
    ok &= check("check steps scale with slope 1", scaling.metrics["slope"] == 1.0)

    sys.exit(0 if ok else 1)
