#pragma once

#include "axvit/axmul.hpp"
#include "axvit/catalog.hpp"
#include "axvit/checkpoint.hpp"
#include "axvit/common.hpp"
#include "axvit/data.hpp"
#include "axvit/dse.hpp"
#include "axvit/kernels.hpp"
#include "axvit/nn.hpp"
#include "axvit/quant.hpp"
#include "axvit/tensor.hpp"
#include "axvit/train.hpp"
