#pragma once

#include "equiquant/tensor.hpp"
#include "equiquant/autograd.hpp"
#include "equiquant/geometry.hpp"
#include "equiquant/quantizers.hpp"
#include "equiquant/model.hpp"
#include "equiquant/data.hpp"
#include "equiquant/checkpoint.hpp"
#include "equiquant/training.hpp"
#include "equiquant/int8_infer.hpp"
#include "equiquant/config.hpp"
