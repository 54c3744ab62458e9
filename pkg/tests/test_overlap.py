"""Communication overlap: the two-fold schedule hides transfers up to the
attention time and shows them beyond it.

Wire times are volume-proportional and anchored at the pre->attn payload, so
"comm = c" means that payload takes c units on the wire; smaller payloads take
proportionally less.  Unit times (2, 2, 2)-style ratios would let the backward
hide trivially, so (2, 3, 2) is used: attention is the cover, pre/post are the
work it must cover for.
"""

import pytest

from pipelab.config import ModelConfig
from pipelab.costs import EDGE_PRE_ATTN, DurationTable, comm_volume
from pipelab.engine import CommModel
from pipelab.generators import generate, warmup_mbs
from pipelab.simulate import overlap_report, simulate

TABLE = DurationTable.from_units(2, 3, 2)
T_ATTN = 3


def _cfg(p, m=None):
    return ModelConfig(L=p, h=16, s=24, b=1, num_heads=4, p=p, m=m or 2 * p)


def _run(cfg, cost):
    vol = comm_volume(cfg, EDGE_PRE_ATTN, qkv_in_attention=False)
    sched = generate("helix_twofold", cfg, TABLE, qkv_in_attention=False)
    comm = CommModel.zero() if cost == 0 else CommModel.uniform(cost, ref_volume=vol)
    return simulate(sched, TABLE, comm)


@pytest.mark.parametrize("p", [2, 4, 8])
def test_steady_state_hides_comm_up_to_attention_time(p):
    cfg = _cfg(p)
    for cost in (0, 1, 2, T_ATTN):
        sim = _run(cfg, cost)
        rep = overlap_report(sim)
        assert rep.steady_wait == 0, (p, cost, rep.steady_wait)


@pytest.mark.parametrize("p", [2, 4, 8])
def test_doubled_comm_is_exposed(p):
    cfg = _cfg(p)
    covered = _run(cfg, T_ATTN)
    exposed = _run(cfg, 2 * T_ATTN)
    assert overlap_report(exposed).steady_wait > 0
    assert exposed.metrics.makespan > covered.metrics.makespan


def test_exposed_delay_grows_with_cost():
    cfg = _cfg(4)
    waits = [overlap_report(_run(cfg, c)).steady_wait for c in (6, 9, 12)]
    assert waits[0] < waits[1] < waits[2]


def test_only_pair_leads_wait_when_covered():
    # whoever runs first in a pair has nothing to hide behind; at covered cost
    # every residual wait must sit on such a lead (hidden=False rows), never
    # on the member whose transfer the fold promises to cover
    cfg = _cfg(4)
    rep = overlap_report(_run(cfg, T_ATTN))
    assert rep.rows, "expected some exposed lead waits at cost = t_attn"
    for row in rep.rows:
        assert not row.hidden, row
    assert rep.total_wait > 0
    assert rep.steady_wait == 0
    assert rep.warmup_mbs == warmup_mbs(_run(cfg, 0).sched)


def test_longer_runs_stay_hidden():
    # steady state means every extra fold is also covered: quadruple m
    cfg = _cfg(2, m=16)
    assert overlap_report(_run(cfg, T_ATTN)).steady_wait == 0
    assert overlap_report(_run(cfg, 2 * T_ATTN)).steady_wait > 0
