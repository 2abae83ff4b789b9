import pytest

from ckdrec.dataio import SyntheticSpec, leave_one_out_split, synthesize


@pytest.fixture(scope="session")
def small_split():
    spec = SyntheticSpec(num_domains=2, users_per_domain=120, items_per_domain=40, pool_items=60,
                         latent_dim=4, avg_len=7.0, seed=11)
    return leave_one_out_split(synthesize(spec)[-1].dataset)
