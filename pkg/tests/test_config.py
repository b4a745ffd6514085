import json
import os

import pytest

from conftest import base_config
from itm.services import data_manager
from itm.services.data_manager import config_from_dict, load_config
from itm.utils.errors import ItmError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'configs')


def write_config(tmp_path, raw, name='exp.json'):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


class TestDefaults:
    def test_minimal_mapping(self):
        config = config_from_dict({'schedule': [{'T': 1.5, 'eps': 0.1, 'eta0': 0.5}]}, apply_env=False)
        assert config.kind == 'run'
        assert config.solver == 'auto'
        assert config.grid.d == 1 and config.grid.N == 512 and config.grid.L == 20.0
        assert config.run.t_end == pytest.approx(3.5)
        assert config.run.snapshots == (pytest.approx(3.5),)
        assert config.oracle.times == (pytest.approx(3.0),)
        assert config.medium == {'preset': 'free'}
        assert config.initial['u0'] == {'type': 'zero'}
        assert config.name == 'experiment'

    def test_two_dimensional_resolution(self):
        config = config_from_dict({'grid': {'d': 2}}, apply_env=False)
        assert config.grid.N == 256

    def test_no_windows(self):
        config = config_from_dict({}, apply_env=False)
        assert config.schedule == ()
        assert config.run.t_end == 1.0

    def test_windows_sorted(self):
        raw = base_config(schedule=[{'T': 2.5, 'eps': 0.1, 'eta0': 0.5}, {'T': 1.0, 'eps': 0.0, 'eta0': 0.2}],
                          run={'t_end': 4.0})
        config = config_from_dict(raw, apply_env=False)
        assert [w.T for w in config.schedule] == [1.0, 2.5]

    def test_name_from_file(self, tmp_path):
        raw = base_config()
        del raw['name']
        assert load_config(write_config(tmp_path, raw, 'refocus_scan.json'), apply_env=False).name == 'refocus_scan'

    @pytest.mark.parametrize('name', sorted(os.listdir(CONFIG_DIR)))
    def test_shipped_configs_load(self, name):
        config = load_config(os.path.join(CONFIG_DIR, name), apply_env=False)
        assert config.kind in data_manager.KINDS

    def test_monotone_tolerance_defaults_to_strict(self):
        assert config_from_dict(base_config(), apply_env=False).refocus.monotone_tol == 0.0
        water = load_config(os.path.join(CONFIG_DIR, 'water_tank.json'), apply_env=False)
        assert water.refocus.monotone_tol == pytest.approx(0.025)


class TestValidation:
    def _code_and_context(self, raw):
        with pytest.raises(ItmError) as exc:
            config_from_dict(raw, apply_env=False)
        return exc.value.code, exc.value.context

    def test_window_opening_before_zero(self):
        code, context = self._code_and_context(base_config(schedule=[{'T': 0.05, 'eps': 0.1, 'eta0': 0.5}]))
        assert code == "ITM-901"
        assert context == 'schedule[0]'

    def test_window_after_run_end(self):
        code, context = self._code_and_context(base_config(run={'t_end': 1.5}))
        assert (code, context) == ("ITM-901", 'schedule[0]')

    def test_window_after_run_end_only_matters_for_runs(self):
        config = config_from_dict(base_config(kind='refocus', run={'t_end': 1.5}), apply_env=False)
        assert config.kind == 'refocus'

    def test_overlapping_windows(self):
        raw = base_config(schedule=[{'T': 1.0, 'eps': 0.4, 'eta0': 0.5}, {'T': 1.3, 'eps': 0.4, 'eta0': 0.5}])
        assert self._code_and_context(raw) == ("ITM-901", 'schedule')

    def test_touching_windows_allowed(self):
        raw = base_config(schedule=[{'T': 1.0, 'eps': 0.2, 'eta0': 0.5}, {'T': 1.2, 'eps': 0.2, 'eta0': 0.5}])
        assert len(config_from_dict(raw, apply_env=False).schedule) == 2

    def test_negative_weight(self):
        code, context = self._code_and_context(base_config(schedule=[{'T': 1.0, 'eps': 0.1, 'eta0': -0.5}]))
        assert (code, context) == ("ITM-901", 'schedule[0].eta0')

    def test_unknown_preset(self):
        code, context = self._code_and_context(base_config(medium={'preset': 'glass'}))
        assert (code, context) == ("ITM-204", 'medium.preset')

    def test_unknown_kind(self):
        assert self._code_and_context(base_config(kind='movie'))[1] == 'kind'

    def test_resolution_must_be_power_of_two(self):
        assert self._code_and_context(base_config(grid={'d': 1, 'L': 20.0, 'N': 100}))[1] == 'grid.N'

    def test_cfl_above_one(self):
        assert self._code_and_context(base_config(run={'t_end': 3.5, 'cfl': 1.2}))[1] == 'run.cfl'

    def test_snapshot_outside_run(self):
        assert self._code_and_context(base_config(run={'t_end': 3.5, 'snapshots': [4.0]}))[1] == 'run.snapshots[0]'

    def test_negative_monotone_tolerance(self):
        raw = base_config(refocus={'monotone_tol': -0.1})
        assert self._code_and_context(raw) == ("ITM-901", 'refocus.monotone_tol')

    def test_single_refinement_level(self):
        assert self._code_and_context(base_config(oracle={'levels': 1}))[1] == 'oracle.levels'

    def test_bad_data_type(self):
        assert self._code_and_context(base_config(initial={'u0': {'type': 'square'}}))[1] == 'initial.u0'

    def test_mode_indices_match_dimension(self):
        raw = base_config(initial={'u0': {'type': 'mode-sum', 'modes': [{'m': [1, 2]}]}})
        assert self._code_and_context(raw)[1] == 'initial.u0.modes[0].m'

    @pytest.mark.parametrize('kind', ['sweep', 'refocus', 'jump-limit', 'uniformity'])
    def test_kinds_that_need_windows(self, kind):
        assert self._code_and_context(base_config(kind=kind, schedule=[])) == ("ITM-901", 'schedule')

    def test_seed_and_threads(self):
        assert self._code_and_context(base_config(seed=-1))[1] == 'seed'
        assert self._code_and_context(base_config(threads=0))[1] == 'threads'


class TestLoading:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ItmError) as exc:
            load_config(str(tmp_path / 'absent.json'))
        assert exc.value.code == "ITM-900"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"kind": "run",')
        with pytest.raises(ItmError) as exc:
            load_config(str(path))
        assert exc.value.code == "ITM-900"

    def test_root_must_be_object(self, tmp_path):
        path = tmp_path / 'list.json'
        path.write_text('[1, 2]')
        with pytest.raises(ItmError) as exc:
            load_config(str(path))
        assert exc.value.code == "ITM-901"

    def test_cache(self, tmp_path):
        path = write_config(tmp_path, base_config())
        first = load_config(path, apply_env=False)
        second = load_config(path, apply_env=False)
        assert len(data_manager.CONFIG_CACHE) == 1
        assert first == second
        assert first.hash == second.hash
        data_manager.clear_cache()
        assert not data_manager.CONFIG_CACHE

    def test_cached_mapping_is_not_shared(self, tmp_path):
        path = write_config(tmp_path, base_config())
        load_config(path, apply_env=False).raw['seed'] = 99
        assert load_config(path, apply_env=False).seed == 0


class TestEnvironment:
    def test_overrides(self, monkeypatch, tmp_path):
        monkeypatch.setenv('ITM_SEED', '7')
        monkeypatch.setenv('ITM_THREADS', '3')
        monkeypatch.setenv('ITM_CFL', '0.25')
        monkeypatch.setenv('ITM_OUT_DIR', str(tmp_path))
        config = config_from_dict(base_config())
        assert config.seed == 7
        assert config.threads == 3
        assert config.run.cfl == 0.25
        assert config.out_dir == str(tmp_path)

    def test_disabled(self, monkeypatch):
        monkeypatch.setenv('ITM_SEED', '7')
        assert config_from_dict(base_config(), apply_env=False).seed == 0

    def test_bad_value(self, monkeypatch):
        monkeypatch.setenv('ITM_THREADS', 'many')
        with pytest.raises(ItmError) as exc:
            config_from_dict(base_config())
        assert exc.value.code == "ITM-901"
        assert exc.value.context == 'ITM_THREADS'


class TestHash:
    def test_stable(self):
        assert config_from_dict(base_config(), apply_env=False).hash == \
            config_from_dict(base_config(), apply_env=False).hash

    def test_overrides_change_hash(self):
        config = config_from_dict(base_config(), apply_env=False)
        other = config.with_overrides(seed=5)
        assert other.seed == 5
        assert other.hash != config.hash
        assert config.with_overrides(kind='sweep').kind == 'sweep'
