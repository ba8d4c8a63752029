from typing import Sequence

from django.core.exceptions import ValidationError
from django.core.validators import BaseValidator
from django.utils.deconstruct import deconstructible


@deconstructible
class GreaterThanValidator(BaseValidator):
    message = 'Ensure this value is greater than %(limit_value)s.'
    code = 'greater_than'

    def compare(self, a, b):
        return a <= b


@deconstructible
class NonZeroValidator(BaseValidator):
    message = 'Ensure this value is not zero.'
    code = 'non_zero'

    def __init__(self, message=None):
        super().__init__(0, message)

    def compare(self, a, b):
        return a == b


@deconstructible
class ChoiceValidator(object):
    '''Accept only one of a fixed set of string values, e.g. the values of a TextChoices enum.'''
    message = 'Value %(value)s is not one of %(choices)s.'
    code = 'invalid_choice'

    def __init__(self, choices: Sequence[str]):
        self.choices = tuple(str(c) for c in choices)

    def __call__(self, value):
        if value not in self.choices:
            raise ValidationError(self.message, self.code,
                                  {'value': repr(value), 'choices': ', '.join(self.choices)})

    def __eq__(self, other):
        return isinstance(other, ChoiceValidator) and self.choices == other.choices


@deconstructible
class NonEmptyValidator(object):
    message = 'At least one value is required.'
    code = 'empty'

    def __call__(self, values):
        if len(values) == 0:
            raise ValidationError(self.message, self.code)

    def __eq__(self, other):
        return isinstance(other, NonEmptyValidator)
