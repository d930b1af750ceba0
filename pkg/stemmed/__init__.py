from stemmed.forecast import (ForecastConfig, ForecastResult,
                              multi_period_predict, sample_marks)
from stemmed.models import (EventDatabase, FitOptions, FitResult, ModelVariant,
                            NetworkSpec, NodeId, NodeParams, fit_network,
                            fit_node, intensity, node_loglik)
from stemmed.simulate import build_scenario, simulate_scenario
