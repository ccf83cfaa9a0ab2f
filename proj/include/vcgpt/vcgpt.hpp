#pragma once

#include "vcgpt/error.hpp"
#include "vcgpt/rng.hpp"
#include "vcgpt/tensor.hpp"
#include "vcgpt/ops.hpp"
#include "vcgpt/tokenizer.hpp"
#include "vcgpt/synth_data.hpp"
#include "vcgpt/model.hpp"
#include "vcgpt/checkpoint.hpp"
#include "vcgpt/decoding.hpp"
#include "vcgpt/metrics.hpp"
#include "vcgpt/training.hpp"
#include "vcgpt/attention_export.hpp"
