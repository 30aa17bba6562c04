#pragma once

// Umbrella header for the lowbit training engine.

#include "lowbit/config.hpp"
#include "lowbit/data.hpp"
#include "lowbit/init.hpp"
#include "lowbit/layers.hpp"
#include "lowbit/models.hpp"
#include "lowbit/nn_ops.hpp"
#include "lowbit/ops.hpp"
#include "lowbit/packing.hpp"
#include "lowbit/prng.hpp"
#include "lowbit/quantize.hpp"
#include "lowbit/tensor.hpp"
#include "lowbit/train.hpp"
