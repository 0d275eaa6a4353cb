// Copyright 2026 The dpaflab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DPAF_ERRORS_HPP_
#define DPAF_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace dpaf {

// Invalid parameters, malformed configs, broken invariants. Maps to CLI
// exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what)
      : std::invalid_argument(what) {}
};

// The requested privacy budget cannot be met (or would be exceeded by a
// running job). Maps to CLI exit code 3.
class InfeasibleBudgetError : public std::runtime_error {
 public:
  explicit InfeasibleBudgetError(const std::string& what)
      : std::runtime_error(what) {}
};

// File system and file format failures. Maps to CLI exit code 4.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// IDX reader failure, with the failure class exposed so callers can tell
// a bad magic from a short file from inconsistent image/label counts.
class IdxError : public IoError {
 public:
  enum class Kind { kBadMagic, kTruncated, kCountMismatch };

  IdxError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dpaf

#endif  // DPAF_ERRORS_HPP_
