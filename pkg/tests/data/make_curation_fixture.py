"""Regenerate curation_fixture.jsonl (200 records).

Composition, by construction:
  40 solutions without a boxed answer              -> dropped at "boxed"
  30 bare four-character sums such as "3+4="       -> dropped at "difficulty" (heuristic score 1.0)
  15 two-question prompts                          -> dropped at "noise" (multipart)
  10 solutions with an unbalanced brace            -> dropped at "noise" (noisy)
  105 clean, non-trivial problems                  -> survive every stage
"""

import json
import random

rng = random.Random(20240321)
rows = []


def add(question, solution, answer, source):
    rows.append({"id": f"fx-{len(rows):03d}", "question": question, "solution": solution,
                 "answer": answer, "source": source})


def word_problem():
    a, b = rng.randint(10, 99), rng.randint(10, 99)
    return f"What is {a}+{b}?", a + b


for _ in range(40):
    q, s = word_problem()
    add(q, f"Adding gives {s}.", str(s), "s1")
for _ in range(30):
    a, b = rng.randint(0, 9), rng.randint(0, 9)
    add(f"{a}+{b}=", f"{a}+{b}={a + b} so \\boxed{{{a + b}}}", str(a + b), "deepscaler")
for _ in range(15):
    q, s = word_problem()
    add(q + " Then what is twice that?", f"First \\boxed{{{s}}}", str(s), "s1")
for _ in range(10):
    q, s = word_problem()
    add(q, f"{{scratch \\boxed{{{s}}}", str(s), "deepscaler")
for i in range(105):
    q, s = word_problem()
    add(q, f"Carry the digits: \\boxed{{{s}}}", str(s), "s1" if i % 2 else "deepscaler")

order = list(range(len(rows)))
rng.shuffle(order)
with open("curation_fixture.jsonl", "w") as fh:
    for i in order:
        fh.write(json.dumps(rows[i]) + "\n")
