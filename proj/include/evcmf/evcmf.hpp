#pragma once

#include "evcmf/error.hpp"
#include "evcmf/tensor.hpp"
#include "evcmf/ops.hpp"
#include "evcmf/param_store.hpp"
#include "evcmf/grad_check.hpp"
#include "evcmf/video.hpp"
#include "evcmf/backbone.hpp"
#include "evcmf/masked_encoder.hpp"
#include "evcmf/decoder.hpp"
#include "evcmf/config.hpp"
#include "evcmf/vocabulary.hpp"
#include "evcmf/model.hpp"
#include "evcmf/training.hpp"
#include "evcmf/synth_data.hpp"
#include "evcmf/checkpoint.hpp"
#include "evcmf/trainer.hpp"
#include "evcmf/inference.hpp"
#include "evcmf/metrics.hpp"
#include "evcmf/diagnostics.hpp"
