"""Finite-difference checks of every differentiable layer and of whole networks.

    python3 demos/02_gradient_checks.py [instances]
"""

import sys
import time

from hdconv import gradcheck

instances = int(sys.argv[1]) if len(sys.argv) > 1 else 5

# Each layer is evaluated in float64 on random sparse inputs.  The analytic
# gradient from the tape is compared with central differences (step 1e-5).
start = time.perf_counter()
results = gradcheck.run_all(instances=instances, seed=0)
for r in results:
    flag = "ok  " if r.passed else "FAIL"
    print(f"{flag} {r.name:<24} worst relative error {r.max_rel_error:.2e} (tol {r.tol:.0e})")
print(f"\n{sum(r.passed for r in results)}/{len(results)} passed "
      f"in {time.perf_counter() - start:.1f}s")
