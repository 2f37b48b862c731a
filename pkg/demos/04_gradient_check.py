"""Check the hand-written backward pass of the full objective.

The objective is prototype cross-entropy plus alpha times the ranking and
cluster losses over all six blocks. Each parameter entry is compared with
a fourth-order central difference. Points near a hinge, argmin switch or
rectifier kink are jittered away first.

Run: python3 demos/04_gradient_check.py [n_seeds]
"""

import sys

from poer.netcore import grad_check, gradcheck_problem, objective_fn


def main(n_seeds: int = 3):
    for seed in range(n_seeds):
        prob = gradcheck_problem(seed)
        fn, loss_fn = objective_fn(prob.x, prob.y, prob.d, prob.cfg, alpha=0.2)
        rep = grad_check(fn, prob.params, loss_fn=loss_fn, seed=seed)
        print(f"seed {seed}: {rep.n_checked} entries, max relative error {rep.max_rel_error:.2e} "
              f"at {rep.worst_path}, {rep.retries} jitter retries")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
