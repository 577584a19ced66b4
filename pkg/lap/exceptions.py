''' Exception types raised across the package. Most of them are also
ValueErrors, since they signal bad input rather than a broken runtime. '''


class LapError(Exception):
    ''' Base class for every error the toolkit raises on purpose. '''


class LapConfigError(LapError, ValueError):
    ''' Invalid or inconsistent configuration. Carries the offending keys. '''

    def __init__(self, message, keys=None):
        self.keys = sorted(keys) if keys else []
        if self.keys:
            message = '%s: %s' % (message, ', '.join(self.keys))
        super(LapConfigError, self).__init__(message)


class LapNumericError(LapError, ArithmeticError):
    ''' Non-finite values where finite ones are required. '''


class GeometryError(LapError, ValueError):
    ''' Kernel, stride or output-size geometry that cannot be realized. '''


class LapArgumentError(LapError, ValueError):
    ''' Out-of-range or mismatched function arguments. '''


class PlacementError(LapError, ValueError):
    ''' A LAP placement that targets a missing or non-replaceable layer. '''


class GraphValidationError(LapError, ValueError):
    ''' A layer graph whose shapes no longer line up. '''


class StackValidationError(LapError, ValueError):
    ''' An interpretation stack whose layer resolutions are inconsistent. '''


class ThresholdFitError(LapError, ValueError):
    ''' The global threshold classifier could not be fitted. '''


class ProbeTrainingError(LapError, ValueError):
    ''' The concept-size probe could not be trained. '''


class SynthSpecError(LapError, ValueError):
    ''' A synthetic dataset specification that cannot be realized. '''


class LapParseError(LapError, ValueError):
    ''' A malformed line in an annotation file. '''

    def __init__(self, message, line_number=None, field=None):
        self.line_number = line_number
        self.field = field
        prefix = []
        if line_number is not None:
            prefix.append('line %d' % line_number)
        if field is not None:
            prefix.append("field '%s'" % field)
        if prefix:
            message = '%s: %s' % (', '.join(prefix), message)
        super(LapParseError, self).__init__(message)


class LapIntegrityError(LapError, IOError):
    ''' A container or checkpoint that fails its format or digest checks. '''
