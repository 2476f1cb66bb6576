"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class CloudbusError(Exception):
    """Base class for all framework errors."""


# -- event model ------------------------------------------------------------

class ValidationError(CloudbusError):
    """An event or domain object violates one of its invariants."""


class NoMatchingRule(CloudbusError):
    """No normalization rule matched the raw observation."""


class MissingField(CloudbusError):
    """A matched normalization rule references an absent payload key."""


class InvalidComponent(CloudbusError):
    """A component id or kind violates the component invariants."""


class MalformedLine(CloudbusError):
    """An NDJSON line is not parseable JSON."""


class SchemaViolation(CloudbusError):
    """A parsed NDJSON line is valid JSON but not a valid event."""


# -- event bus ---------------------------------------------------------------

class AuthError(CloudbusError):
    """Token is unknown or lacks the role required for the operation."""


class Timeout(CloudbusError):
    """No event became available within the requested timeout."""


class SubscriptionClosed(CloudbusError):
    """The subscription was revoked or closed."""


class UnknownSubscription(CloudbusError):
    """No subscription with the given id exists."""


# -- collector ---------------------------------------------------------------

class DuplicateDriver(CloudbusError):
    """A probe driver name is already registered."""


class UnknownDriver(CloudbusError):
    """A probe spec references a driver that is not registered."""


class UnauthorizedProbe(CloudbusError):
    """The probe's credential scope does not cover its target."""


# -- topology ----------------------------------------------------------------

class UnknownComponent(CloudbusError):
    """The referenced component is not present in the inventory."""


class CycleError(CloudbusError):
    """The mutation would create a cycle in the hosts/depends_on graph."""


class LayerError(CloudbusError):
    """The edge or node violates the physical/virtual/service layering."""


# -- simulation / configuration ----------------------------------------------

class InvalidScenario(CloudbusError):
    """A simulation scenario is internally inconsistent."""


class ConfigError(CloudbusError):
    """A configuration file is malformed; the message names the key."""
