# Python package marker for the celltraffic pipeline.
