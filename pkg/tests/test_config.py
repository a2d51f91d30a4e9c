import numpy as np
import pytest

from tsdrive.config import ConfigError, load_identify_config, load_run_config
from tsdrive.tsmodel import save_model

CUSTOM = """
[run]
duration = 6.0
seed = 5
model = "model.json"
initial_state = [1.1, 0.0, 0.1]
delay_one_step = true

[noise]
co_vx = 2e-6
co_omega = 8e-8

[profile]
mode = "track"
arcs = [[10.0, 0.0], [4.0, 0.5]]
vx_max = 2.0
a_lat_max = 1.5

[mpc]
hp = 4
q = [0.3, 1e-6, 0.5]
r = [0.2, 0.1]

[mpc.bounds]
delta = 0.2
a_min = -0.5
a_max = 3.0
d_delta = 0.04
d_a = 0.4

[mhe]
hp = 8
q = [0.1, 0.2, 0.1]
r = [0.3, 0.3]

[mhe.state_box]
vx = [0.2, 2.5]
vy = [-0.1, 0.1]
omega = [-1.5, 1.5]

[solver]
eps_abs = 1e-7
eps_rel = 1e-7
max_iter = 5000

[identify]
duration = 30.0
epochs = 2
noisy_targets = true
"""


@pytest.fixture
def config_path(tmp_path, quick_model):
    save_model(quick_model, tmp_path / "model.json")
    path = tmp_path / "config.toml"
    path.write_text(CUSTOM)
    return path


class TestRunConfig:
    def test_all_sections_parsed(self, config_path):
        cfg = load_run_config(config_path)
        assert cfg.duration == 6.0
        assert cfg.seed == 5
        assert cfg.delay_one_step is True
        assert cfg.initial_state == (1.1, 0.0, 0.1)
        assert cfg.noise.co_vx == 2e-6 and cfg.noise.co_omega == 8e-8

        assert cfg.mpc.hp == 4
        assert np.allclose(np.diag(cfg.mpc.Q), [0.3, 1e-6, 0.5])
        assert np.allclose(np.diag(cfg.mpc.R), [0.2, 0.1])
        assert np.allclose(cfg.mpc.input_poly[1], [0.2, 0.2, 3.0, 0.5])
        assert np.allclose(cfg.mpc.rate_poly[1], [0.04, 0.04, 0.4, 0.4])
        assert cfg.mpc.solver.eps_abs == 1e-7
        assert cfg.mpc.solver.max_iter == 5000

        assert cfg.mhe.hp == 8
        assert np.allclose(np.diag(cfg.mhe.Q), [0.1, 0.2, 0.1])
        assert np.allclose(cfg.mhe.state_lower, [0.2, -0.1, -1.5])
        assert np.allclose(cfg.mhe.state_upper, [2.5, 0.1, 1.5])

        # track-mode profile: straight at vx_max, then the curvature cap
        assert cfg.profile.lookup(0.0)[0] == 2.0
        vx, _, om = cfg.profile.lookup(5.1)
        assert vx == pytest.approx(np.sqrt(1.5 / 0.5))
        assert om == pytest.approx(0.5 * vx)

    def test_seed_override(self, config_path):
        cfg = load_run_config(config_path, seed_override=77)
        assert cfg.seed == 77
        assert cfg.noise.seed == 77

    def test_missing_model_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[run]\nduration = 1.0\n")
        with pytest.raises(ConfigError, match="run.model"):
            load_run_config(path)

    def test_bad_profile_mode(self, config_path):
        text = config_path.read_text().replace('mode = "track"',
                                               'mode = "mystery"')
        config_path.write_text(text)
        with pytest.raises(ConfigError, match="profile"):
            load_run_config(config_path)

    def test_bad_duration(self, config_path):
        text = config_path.read_text().replace("duration = 6.0",
                                               "duration = -1.0")
        config_path.write_text(text)
        with pytest.raises(ConfigError, match="duration"):
            load_run_config(config_path)

    def test_bad_vehicle_value(self, config_path):
        config_path.write_text(config_path.read_text()
                               + "\n[vehicle]\nm = -1.0\n")
        with pytest.raises(ConfigError, match="vehicle"):
            load_run_config(config_path)


class TestIdentifyConfig:
    def test_identify_section(self, config_path):
        ident, vehicle, noise = load_identify_config(config_path)
        assert ident.duration == 30.0
        assert ident.learn.epochs == 2
        assert ident.noisy_targets is True
        assert noise.co_vx == 2e-6

    def test_defaults_without_section(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[run]\nduration = 1.0\n")
        ident, _, _ = load_identify_config(path)
        assert ident.duration == 240.0
        assert ident.learn.n_mf == 2
