#pragma once

#include "l2sm/bounds.hpp"
#include "l2sm/config.hpp"
#include "l2sm/data_io.hpp"
#include "l2sm/error.hpp"
#include "l2sm/kernels.hpp"
#include "l2sm/layers.hpp"
#include "l2sm/loss.hpp"
#include "l2sm/network.hpp"
#include "l2sm/pairs.hpp"
#include "l2sm/rng.hpp"
#include "l2sm/tensor.hpp"
#include "l2sm/trainer.hpp"
#include "l2sm/verify.hpp"
