/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "fasl/cluster.hpp"
#include "fasl/corpus.hpp"
#include "fasl/embedding_cache.hpp"
#include "fasl/encoder.hpp"
#include "fasl/error.hpp"
#include "fasl/forest.hpp"
#include "fasl/fsl.hpp"
#include "fasl/metrics.hpp"
#include "fasl/model_io.hpp"
#include "fasl/perfpred.hpp"
#include "fasl/select.hpp"
#include "fasl/simulate.hpp"
