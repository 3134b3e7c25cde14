# Copyright 2026 The damped-transport-mc Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.


class ManifoldMCError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ManifoldMCError, ValueError):
    pass


class CatalogError(ManifoldMCError, ValueError):
    pass


class CapabilityError(ManifoldMCError, ValueError):
    pass


class ConfigError(ManifoldMCError, ValueError):
    pass


class EstimationError(ManifoldMCError):
    pass


class VerificationError(ManifoldMCError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ChartExitError(ManifoldMCError):
    def __init__(self, message, last_state=None, failed=None):
        super().__init__(message)
        self.last_state = last_state
        self.failed = failed


class IntegrationError(ManifoldMCError):
    def __init__(self, message, last_state=None, failed=None):
        super().__init__(message)
        self.last_state = last_state
        self.failed = failed
