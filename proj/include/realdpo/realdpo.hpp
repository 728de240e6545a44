// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "realdpo/checkpoint.hpp"
#include "realdpo/core.hpp"
#include "realdpo/data.hpp"
#include "realdpo/diffusion.hpp"
#include "realdpo/dpo.hpp"
#include "realdpo/eval.hpp"
#include "realdpo/model.hpp"
#include "realdpo/refmodel.hpp"
#include "realdpo/sampling.hpp"
#include "realdpo/trainer.hpp"
