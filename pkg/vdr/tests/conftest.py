import pytest

from vdr.gateway import ModelRoles
from vdr.prompts import PromptLibrary
from vdr.sim import SimBackend, SimModels, SimPolicy, build_world
from vdr.tools import ToolBox, ToolPool


@pytest.fixture(scope="session")
def world():
    return build_world(seed=11, n_entities=20, n_pages=24)


@pytest.fixture(scope="session")
def prompts():
    return PromptLibrary()


@pytest.fixture
def pool():
    with ToolPool(8) as p:
        yield p


@pytest.fixture
def roles(world):
    return ModelRoles.single(SimModels(world, policy=SimPolicy()))


@pytest.fixture
def toolbox(world, pool, roles, prompts):
    return ToolBox(SimBackend(world, sleep=False), pool, roles.summarizer, prompts, seed=world.seed)
