"""Stability analysis of finite-buffer networks modelled as ODEs."""

__version__ = "0.1.0"

from .network import (CommoditySpec, Link, NetworkInstance, Node, UNBOUNDED, constant,
                      network_from_config, overloaded_sources, validate_topology)
from .policies import (buffer_occupancy, constant_rate_policy, custom_policy, shared_buffer_backpressure,
                       smooth_backpressure)
from .dynamics import drift, integrate, throughput_estimate
from .stability import (check_block_dominance, check_column_dominance, check_m_matrix, eigen_spectrum,
                        grid_condition_scan, jacobian, lyapunov_certificate, perron_null_vector)
from .equilibrium import (construct_backpressure_box, existence_sweep, find_equilibrium, per_commodity_box,
                          verify_poincare_miranda)
