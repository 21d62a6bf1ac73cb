/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "llmfuse/decoding.hpp"
#include "llmfuse/errors.hpp"
#include "llmfuse/fusion.hpp"
#include "llmfuse/metrics.hpp"
#include "llmfuse/nn.hpp"
#include "llmfuse/numcore.hpp"
#include "llmfuse/pipeline.hpp"
#include "llmfuse/rerank.hpp"
#include "llmfuse/speech_encoder.hpp"
#include "llmfuse/synthdata.hpp"
#include "llmfuse/toklm.hpp"
#include "llmfuse/trainer.hpp"
