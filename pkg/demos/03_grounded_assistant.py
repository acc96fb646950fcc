"""Ask the grounded survey assistant a few questions and show how every
numeric claim is cited to an evidence cell — and how it refuses when the
evidence does not exist.

Run:  python demos/03_grounded_assistant.py [--n 500]
"""

import argparse
import warnings

from surveykit import synth
from surveykit.core import Codebook
from surveykit.service import answer_question

QUESTIONS = [
    "How stressed were respondents while getting ready for the storm?",
    "Did people with flexible work schedules report less stress?",
    "Were renters more disrupted than homeowners?",
    "How many respondents kept a generator fueled up?",       # not measured
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    warnings.simplefilter("ignore")

    cb = Codebook.default()
    train = synth.generate(synth.default_config(n=args.n, seed=args.seed), cb)

    for q in QUESTIONS:
        binding, bundle, answer = answer_question(q, train)
        print(f"\nQ: {q}")
        print(f"   variables: {binding.fields or '(none)'}")
        if answer.status == "answered":
            print(f"   A: {answer.answer_text}")
            for token, cell in answer.citations.items():
                print(f"      [{token} <- {cell}]")
        else:
            print(f"   REFUSED ({answer.refusal_reason}): "
                  f"{answer.missing_evidence}")


if __name__ == "__main__":
    main()
