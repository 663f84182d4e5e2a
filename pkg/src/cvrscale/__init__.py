"""CVR ranking scaling workbench."""

from cvrscale.__about__ import __version__  # noqa: F401
from cvrscale.config import RunConfig  # noqa: F401
from cvrscale.evaluation import mean_ap, perm_importance  # noqa: F401
from cvrscale.features import MISSING, FeatureSchema, FeatureSpec  # noqa: F401
from cvrscale.model import CvrModel  # noqa: F401
from cvrscale.training import RankingGroup, train  # noqa: F401
