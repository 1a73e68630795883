#pragma once

#include "saak/classifier.hpp"
#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/feature_select.hpp"
#include "saak/kernel_fit.hpp"
#include "saak/kv_text.hpp"
#include "saak/parallel.hpp"
#include "saak/patches.hpp"
#include "saak/pipeline.hpp"
#include "saak/random.hpp"
#include "saak/tensor.hpp"
#include "saak/transform.hpp"
