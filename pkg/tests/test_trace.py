import numpy as np
import pytest

from conftest import make_scenario
from greenroute.trace import Trace, diurnal_rates, load_trace, synth_trace, trace_from_spec


def test_constant_trace_is_reproducible():
    a = synth_trace('constant', 50, seed=3, base_volume=1000)
    b = synth_trace('constant', 50, seed=3, base_volume=1000)
    assert a.volumes.tolist() == b.volumes.tolist()
    assert abs(a.volumes.mean() - 1000) < 4 * np.sqrt(1000 / 50.)
    assert synth_trace('constant', 50, seed=4, base_volume=1000).volumes.tolist() != \
        a.volumes.tolist()


def test_step_trace_is_exact():
    trace = synth_trace('step', 100, step_from=100, step_to=200, step_epoch=50,
                        regions=('r0', 'r1', 'r2'))
    assert trace.volumes[:50].tolist() == [100] * 50
    assert trace.volumes[50:].tolist() == [200] * 50
    counts = trace[0].to_arrays(trace.model_ids, trace.regions)[0]
    assert counts.sum() == 100
    assert counts.tolist() == [[24, 23, 23], [10, 10, 10]]


@pytest.mark.parametrize('seed', range(3))
def test_bursty_trace_has_spikes(seed):
    trace = synth_trace('bursty', 1344, seed=seed)
    assert trace.volume_max / trace.volume_median >= 5


def test_diurnal_trace_follows_the_day():
    trace = synth_trace('diurnal', 96, seed=0, base_volume=10000, region_longitudes=[0.])
    volumes = trace.volumes
    assert volumes[48] > 1.3 * volumes[0]
    rates = diurnal_rates(96, 10000, [0.])
    assert rates[48, 0] == pytest.approx(15000.)
    assert rates[0, 0] == pytest.approx(5000.)


def test_model_mix():
    trace = synth_trace('constant', 200, seed=0, base_volume=1000, model_mix=(0.5, 0.5))
    llama_7b = trace.series('llama-7b', 'region-0').sum()
    llama_70b = trace.series('llama-70b', 'region-0').sum()
    assert llama_7b / (llama_7b + llama_70b) == pytest.approx(0.5, abs=0.02)


def test_unknown_pattern():
    with pytest.raises(ValueError):
        synth_trace('weekly', 10)


def test_csv_round_trip(tmp_path):
    trace = synth_trace('diurnal', 12, seed=1, base_volume=500, regions=('r0', 'r1'),
                        region_longitudes=(0., 90.))
    filename = tmp_path / 'trace.csv'
    trace.save(filename)
    loaded = load_trace(filename)
    assert loaded.model_ids == trace.model_ids
    assert loaded.regions == trace.regions
    assert loaded.volumes.tolist() == trace.volumes.tolist()
    for a, b in zip(loaded, trace):
        ca, oa, ia = a.to_arrays(trace.model_ids, trace.regions)
        cb, ob, ib = b.to_arrays(trace.model_ids, trace.regions)
        assert ca.tolist() == cb.tolist()
        np.testing.assert_allclose(oa, ob)
        np.testing.assert_allclose(ia, ib)


def test_csv_gaps_become_empty_epochs(tmp_path):
    filename = tmp_path / 'gaps.csv'
    filename.write_text('epoch,model_class,origin_region,requests,avg_in_tokens,avg_out_tokens\n'
                        '4,small,r0,10,50,100\n'
                        '6,small,r0,20,50,100\n')
    trace = load_trace(filename)
    assert len(trace) == 3
    assert trace.volumes.tolist() == [10, 0, 20]
    assert trace[1].epoch_index == 1


def test_csv_missing_columns(tmp_path):
    filename = tmp_path / 'bad.csv'
    filename.write_text('epoch,requests\n0,10\n')
    with pytest.raises(ValueError):
        load_trace(filename)


def test_trace_from_spec():
    scenario = make_scenario(regions={'r0': (0., 0.), 'r1': (10., 100.)})
    trace = trace_from_spec('synthetic:constant', scenario, 8, seed=0, base_volume=100)
    assert len(trace) == 8
    assert trace.model_ids == ('small',)
    assert trace.regions == ('r0', 'r1')
    with pytest.raises(ValueError):
        trace_from_spec('azure:2023', scenario, 8)


def test_window():
    trace = synth_trace('step', 10, step_from=10, step_to=20, step_epoch=5)
    assert isinstance(trace.window(4, 6), Trace)
    assert trace.window(4, 6).volumes.tolist() == [10, 20]
