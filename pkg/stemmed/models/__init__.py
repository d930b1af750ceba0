from .database import EventDatabase, EventSnapshot
from .fit import FitOptions, FitResult, fit_network, fit_node
from .likelihood import (compensator, node_loglik, node_loglik_grad,
                         total_loglik)
from .model import (CovariateTrack, Event, IntensityState, ModelVariant,
                    NetworkSpec, NodeId, NodeParams, arc_weight, intensity)
