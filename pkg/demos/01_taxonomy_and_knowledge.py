"""
Loading the occupation taxonomy and probing what a model knows about it
=======================================================================

Runs offline: the "model" is the deterministic mock shipped with the package.
Swap in an OpenAICompatibleProvider to probe a real one.
"""

import random
from pathlib import Path

from taxoguide import ALL_VARIANTS, LLMClient, ScriptedProvider, assess, generate_tasks, load_taxonomy, lookup
from taxoguide.knowledge import render_task_prompt
from taxoguide.mock import MockLLM

DATA = Path(__file__).resolve().parents[1] / "data"

# 1,016 occupations, each with an 8-digit code, a title and a description
onet = load_taxonomy(DATA / "onet" / "occupation_data_2019.txt", "onet")
print(len(onet), "occupations in", len(onet.majors()), "major groups")

# codes nest: major -> minor -> broad -> detailed -> specific
ds = lookup(onet, "Data Scientists")
print(ds.label, "|", ds.code.major, ds.code.minor, ds.code.broad, ds.code.detailed)

# lookups accept ids, "Title (code)" strings or loose titles
print(lookup(onet, "data scientists.").id, lookup(onet, "Actuaries (15-2011.00)").title)

# eight probe variants: recall or recognition, code->title or title->code
print([v.name for v in ALL_VARIANTS])

tasks = generate_tasks(onet, ALL_VARIANTS[3], random.Random(0))  # partial recall, code -> title
print(render_task_prompt(tasks[0]))
print()

tasks = generate_tasks(onet, ALL_VARIANTS[-1], random.Random(0))  # recognition of 2-digit codes
print(render_task_prompt(tasks[0]))
print()

# score a model over every task; error_rate makes the mock miss a share of answers
client = LLMClient(ScriptedProvider(MockLLM(onet, seed=0, error_rate=0.2)))
report = assess(client, onet, ALL_VARIANTS, random.Random(0), "mock")
for name, acc in report.accuracy.items():
    print(f"{name:22s} {acc:.3f}")
print(f"{'average':22s} {report.average:.3f}")
