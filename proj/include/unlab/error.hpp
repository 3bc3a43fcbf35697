// Copyright 2026 The unlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace unlab {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

// Raised by pretraining when the accuracy floor is not reached.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double final_accuracy)
      : Error(what), final_accuracy_(final_accuracy) {}
  double final_accuracy() const { return final_accuracy_; }

 private:
  double final_accuracy_;
};

// Raised when a persisted file has an unknown magic or version.
class VersionError : public Error {
 public:
  VersionError(const std::string& what, int found, int expected)
      : Error(what), found_(found), expected_(expected) {}
  int found() const { return found_; }
  int expected() const { return expected_; }

 private:
  int found_;
  int expected_;
};

}  // namespace unlab
