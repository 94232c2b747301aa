"""
Scoring rankings, judging without gold labels, and pricing a run
================================================================
"""

import random

from taxoguide import LLMClient, PricingTable, ScriptedProvider, cost_report, judge_select, precision_at_k, rp_at_k
from taxoguide.evaluation import MethodRun, aggregate, format_table
from taxoguide.llm import UsageRecord

# precision divides by K; RP@K divides by min(#predictions considered, #gold labels)
pred, gold = ["A", "C", "B"], {"A", "B"}
for k in (1, 2, 3):
    print(k, precision_at_k(pred, gold, k), rp_at_k(pred, gold, k))
# note RP@1 = 1.0 but RP@2 = 0.5: RP@K is not monotone in K

truth = {"1": ["A", "B"], "2": ["C"], "3": ["D", "E", "F"]}
runs = [
    MethodRun("tgre/sentence/full", "mock", {"1": ["A", "C", "B"], "2": ["C"], "3": ["X", "D"]}),
    MethodRun("tgre/sentence/no_rerank", "mock", {"1": ["C", "A"], "2": ["Y", "C"], "3": ["D", "E", "F"]}),
]
print(format_table(aggregate(runs, truth, ks=(1, 3, 5))))

# the judge sees every method's top label plus None, shuffled per run, three runs, majority vote
def judge(req):
    options = req.prompt.splitlines()[-1].split("; ")
    return "Answer: " + ("Data Scientists (15-2051.00)" if "Data Scientists (15-2051.00)" in options else options[0])

verdict = judge_select(
    LLMClient(ScriptedProvider(judge)),
    "machine learning engineer, globex",
    {"Data Scientists (15-2051.00)", "Software Developers (15-1252.00)"},
    random.Random(0),
    "judge-model",
)
print(verdict.final, verdict.per_run_selections, verdict.tie_broken_randomly)

# per-record tokens, dollars and seconds; non-LLM time is added per stage
usage = [UsageRecord(f"r{i}", 700, 287, 3.88, "gpt-3.5-turbo", "inference") for i in range(100)]
report = cost_report(usage, PricingTable(), 100, {"embedding": 9.66, "retrieval": 3.07})
o = report.overall
print(f"{o.avg_tokens:.1f} tokens, {o.avg_cost_usd * 1e3:.3f}e-3 USD, {o.avg_seconds:.2f}s, {o.throughput_records_per_second:.2f} records/s")
print(f"one million records: ${o.avg_cost_usd * 1e6:,.2f}")
