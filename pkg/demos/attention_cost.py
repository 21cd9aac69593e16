"""Walk one decoder through its stages and print tensor shapes and attention cost.

Run with ``python3 demos/attention_cost.py``.
"""

import numpy as np

from invpt import tensor as tn
from invpt.decoder import MultiTaskSeq
from invpt.verify import build_decoder_case, complexity_report

T, H0, W0, C0 = 3, 8, 8, 64


def main() -> None:
    dec, f0, taps = build_decoder_case(T, H0, W0, C0, dtype=np.float32)
    with tn.no_grad():
        dec.run_stages(MultiTaskSeq(f0, T, H0, W0), taps)
    print(f"T={T} tasks, {H0}x{W0} grid, C0={C0}")
    for plan, stage in zip(dec.plans, dec.stages):
        tr = stage.last_trace
        print(f"stage {plan.s}: k={plan.k_s} work {plan.work_hw} x {plan.work_channels}  "
              f"Q {tr.shape('Q')}  K {tr.shape('K')}  A {tr.shape('A_m')}")
    print()
    print(complexity_report(T, H0, W0, C0).to_csv(), end="")


if __name__ == "__main__":
    main()
