"""How well does each penalty track the true model error off the training data?

Train an ensemble on medium-quality pointmass data, then score every penalty
against the squared next-state error on uniformly random behaviour data.

    python demos/penalty_calibration.py [--env cliffcar] [--seed 1]
"""

import argparse

from pessimlab.dynamics import ModelConfig, train_ensemble
from pessimlab.envlab import ENV_IDS, generate_dataset, make_env
from pessimlab.penalty import PenaltyContext
from pessimlab.protocols import transfer_calibration


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--env", default="pointmass2d", choices=ENV_IDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="state_and_reward", choices=["state_and_reward", "state_only"])
    args = p.parse_args()

    env = make_env(args.env)
    train = generate_dataset(env, "medium", 5000, args.seed)
    evalset = generate_dataset(env, "random", 2000, args.seed + 100)
    model = train_ensemble(train, ModelConfig(seed=args.seed))
    print(f"trained {model.n_members} members, elites {model.elite_indices.tolist()}")

    rep = transfer_calibration(model, evalset, ctx=PenaltyContext(dims_used=args.dims, seed=args.seed),
                               seed=args.seed)
    print(f"\n{'penalty':<20}{'spearman':>10}{'pearson':>10}{'skew':>8}{'kurt':>8}")
    for kind, st in sorted(rep.statistics.items(), key=lambda kv: -kv[1]["spearman"]):
        print(f"{kind:<20}{st['spearman']:>10.3f}{st['pearson']:>10.3f}{st['skew']:>8.2f}{st['kurtosis']:>8.2f}")
    if rep.flags:
        print("flags:", ", ".join(rep.flags))


if __name__ == "__main__":
    main()
