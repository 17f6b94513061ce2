#pragma once

#include "dots/bank.hpp"
#include "dots/core.hpp"
#include "dots/difficulty.hpp"
#include "dots/grpo.hpp"
#include "dots/metrics.hpp"
#include "dots/nn.hpp"
#include "dots/pretrain.hpp"
#include "dots/replay.hpp"
#include "dots/rng.hpp"
#include "dots/selection.hpp"
#include "dots/serialize.hpp"
#include "dots/trainer.hpp"
