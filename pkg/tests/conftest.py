import pytest

from ballbot_mpc import scenario, sim

# Small node counts keep the mini run's compile and solve times down; it
# still exercises wall contact, a push event and both planner levels.
MINI_TOML = """
[scenario]
name = "mini"
kind = "custom"
duration = 0.6

[[environment.walls]]
id = "front"
point = [0.35, 0.0, 0.0]
inward_normal = [-1.0, 0.0, 0.0]

[initial]
position = [0.0, 0.0]
velocity = [0.8, 0.0]

[reference]
hold = [0.0, 0.0]

[contact]
f_max = 25.0

[mpc]
draft_nodes = 8
draft_horizon = 0.8
refine_nodes = 10
refine_horizon = 0.5
min_contact_duration = 0.25

[[events]]
kind = "push_disturbance"
time = 0.3
force = [30.0, 0.0, 0.0]
duration = 0.1
"""


@pytest.fixture(scope="session")
def mini_log():
    return sim.run_scenario(scenario.parse(MINI_TOML))
