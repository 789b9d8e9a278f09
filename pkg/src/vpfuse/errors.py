"""Exception hierarchy shared by every module."""


class VPFuseError(Exception):
    pass


class ParseError(VPFuseError, ValueError):
    pass


class MissingField(ParseError):
    pass


class FormatError(ParseError):
    pass


class ValidationError(VPFuseError, ValueError):
    pass


class TruncatedInput(ValidationError):
    pass


class ShapeError(VPFuseError, ValueError):
    pass


class DomainError(VPFuseError, ValueError):
    pass


class BehindCamera(VPFuseError, ValueError):
    """Raised when a point projects with non-positive depth."""


class MissingWeight(VPFuseError, KeyError):
    pass
