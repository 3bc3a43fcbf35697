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

// Umbrella header.

#pragma once

#include "unlab/attacks.hpp"
#include "unlab/checkpoint.hpp"
#include "unlab/editor.hpp"
#include "unlab/error.hpp"
#include "unlab/filter.hpp"
#include "unlab/harness.hpp"
#include "unlab/inference.hpp"
#include "unlab/lens.hpp"
#include "unlab/metrics.hpp"
#include "unlab/model.hpp"
#include "unlab/numerics.hpp"
#include "unlab/pretrain.hpp"
#include "unlab/tensor.hpp"
#include "unlab/world.hpp"
