"""Plug-and-play decentralized tube MPC for coupled linear subsystems."""
from .lqr import LqWeights, dare_solve, lq_gain
from .mpc import MpcInfeasible, centralized_mpc_step, mpc_step
from .pnp import Network, PlugRejected, UnplugRejected, design_all, plug_in, unplug
from .powernet import AreaCatalogue, AreaParams, LoadSchedule, builtin_catalogue, scenario
from .qp import QuadProgram, solve
from .rpi import mrpi_outer, rpi_check, rpi_exact_check
from .setops import HPolytope, Zonotope
from .sim import SimInfeasible, SimTrace, simulate
from .tube_synth import DesignOptions, DesignRejected, Subsystem, TubeController, design_controller, tune_gain

__version__ = "0.1.0"
