// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mtpdraft/autograd.hpp"
#include "mtpdraft/bench.hpp"
#include "mtpdraft/checkpoint.hpp"
#include "mtpdraft/corpus.hpp"
#include "mtpdraft/distill.hpp"
#include "mtpdraft/error.hpp"
#include "mtpdraft/grad_check.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/pipeline.hpp"
#include "mtpdraft/sampling.hpp"
#include "mtpdraft/specdec.hpp"
#include "mtpdraft/tensor.hpp"
#include "mtpdraft/tokenizer.hpp"
#include "mtpdraft/training.hpp"
#include "mtpdraft/vocab.hpp"
