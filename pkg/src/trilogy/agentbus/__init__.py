"""Agent layer: mediator, resource agents and personal assistants over a JSON-lines TCP protocol."""

from trilogy.agentbus.mediator import Advertisement, MediatorAgent, Registry, RegistrationError
from trilogy.agentbus.paa import (
    MergedHit,
    MergedResult,
    NewDocument,
    PeerQuery,
    PersonalAssistant,
    ProfileStore,
    UserProfile,
    proactive_scan,
    similarity,
    update_profile,
)
from trilogy.agentbus.protocol import AgentClient, Message, ServiceFailure
from trilogy.agentbus.resource import (
    BrokerResource,
    MockExperiment,
    ResourceAgent,
    ResourceFailure,
    Scheduler,
    ServiceTicket,
)

__all__ = [
    "Advertisement", "AgentClient", "BrokerResource", "MediatorAgent", "MergedHit", "MergedResult",
    "Message", "MockExperiment", "NewDocument", "PeerQuery", "PersonalAssistant", "ProfileStore",
    "Registry", "RegistrationError", "ResourceAgent", "ResourceFailure", "Scheduler", "ServiceFailure",
    "ServiceTicket", "UserProfile", "proactive_scan", "similarity", "update_profile",
]
