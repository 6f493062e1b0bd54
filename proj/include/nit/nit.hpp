// Copyright 2026 The NiT Authors
// SPDX-License-Identifier: Apache-2.0
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

#pragma once

#include "nit/attention.hpp"
#include "nit/blocks.hpp"
#include "nit/checkpoint.hpp"
#include "nit/core.hpp"
#include "nit/dataset.hpp"
#include "nit/diffusion.hpp"
#include "nit/eval.hpp"
#include "nit/model.hpp"
#include "nit/packing.hpp"
#include "nit/rope.hpp"
#include "nit/synth.hpp"
#include "nit/tokenizer.hpp"
#include "nit/train.hpp"
#include "nit/verify.hpp"

namespace nit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace nit
