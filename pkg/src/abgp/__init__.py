"""Authenticated Byzantine gossip: multisig-confirmed records replicated by pull gossip."""
from .crypto import CURVE_ORDER, CurvePoint, KeyPair
from .records import ClusterSpec, RecordModel, SignatureType, Verdict, validate_record
from .state import AppendOutcome, Outcome, StateStore, promote_to_multisig
from .gossip import GossipConfig, GossipMode, GossipNode, PeerCursor
from .sim import FaultBehavior, FaultSpec, ScriptedAppend, SimConfig, SimReport, run_simulation

__version__ = "0.1.0"
