class InvalidOperation(Exception):

    def __init__(self, msg):
        self.msg = msg

    def __str__(self):
        return "%s: %s" % (type(self).__name__, self.msg)


class InfeasibleSpec(InvalidOperation):
    """A map specification whose start or goal would not lie in free space."""


class NoPath(InvalidOperation):
    """The goal region cannot be reached through free or unknown cells."""


class ShapeMismatch(InvalidOperation):
    pass


class DegenerateData(InvalidOperation):
    pass


class InvalidCheckpoint(InvalidOperation):
    pass


class InvalidConfig(InvalidOperation):
    pass
